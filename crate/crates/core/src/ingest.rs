//! Survey loading, cleaning and assembly of households and activities.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    Activity, ActivityId, Diagnostic, Household, HouseholdId, InputCosts, ModelInstance,
    ModelManifest, PerSeason, Practice, PriceSystem, Product, ProductCategory, ProductId,
    ProductPrice, RegionId, Season,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleaningMethod {
    TukeyDrop,
    Winsorize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    Median,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleaningGroup {
    CropRegion,
    Crop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleaningPolicy {
    pub method: CleaningMethod,
    pub tukey_k: f64,
    /// Percentiles, 0..=100.
    pub winsor_lo: f64,
    pub winsor_hi: f64,
    pub impute: Imputation,
    pub group: CleaningGroup,
}

impl Default for CleaningPolicy {
    fn default() -> Self {
        CleaningPolicy {
            method: CleaningMethod::TukeyDrop,
            tukey_k: 1.5,
            winsor_lo: 5.0,
            winsor_hi: 95.0,
            impute: Imputation::Median,
            group: CleaningGroup::CropRegion,
        }
    }
}

impl CleaningPolicy {
    pub fn winsorize(lo: f64, hi: f64) -> Self {
        CleaningPolicy {
            method: CleaningMethod::Winsorize,
            winsor_lo: lo,
            winsor_hi: hi,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.tukey_k > 0.0
            && 0.0 <= self.winsor_lo
            && self.winsor_lo < self.winsor_hi
            && self.winsor_hi <= 100.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput("invalid cleaning policy".into()))
        }
    }
}

/// Quantile by linear interpolation between order statistics (inclusive).
pub fn quantile_linear(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_linear(&v, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanAction {
    Kept,
    Imputed,
    OutlierReplaced,
    Clamped,
}

impl CleanAction {
    pub fn as_str(self) -> &'static str {
        match self {
            CleanAction::Kept => "kept",
            CleanAction::Imputed => "imputed",
            CleanAction::OutlierReplaced => "outlier_replaced",
            CleanAction::Clamped => "clamped",
        }
    }
}

/// Clean one series and say what happened to each entry.
///
/// Tukey fences are first computed on the observed values; dropping is then
/// repeated with fences computed on the completed series (survivors plus
/// their median in every other slot) until nothing more is dropped. The
/// survivor set only shrinks, and the result has no value outside its own
/// fences, so cleaning is idempotent.
/// Winsorizing bounds are the nearest order statistics at or outside the
/// requested percentiles and are likewise applied until they stop moving,
/// so no value outside the observed range is ever produced.
pub fn clean_series_detailed(
    values: &[Option<f64>],
    policy: &CleaningPolicy,
) -> Result<(Vec<f64>, Vec<CleanAction>)> {
    policy.validate()?;
    let mut current: Vec<Option<f64>> = values.iter().map(|v| v.filter(|x| x.is_finite())).collect();
    if current.iter().all(Option::is_none) {
        return Err(Error::Empty("series has no observed values".into()));
    }
    let mut actions: Vec<CleanAction> = current
        .iter()
        .map(|v| if v.is_some() { CleanAction::Kept } else { CleanAction::Imputed })
        .collect();
    match policy.method {
        CleaningMethod::TukeyDrop => {
            let observed: Vec<f64> = current.iter().flatten().copied().collect();
            let mut fences = tukey_fences(&observed, policy.tukey_k);
            let mut fill = median(&observed);
            loop {
                for (i, v) in current.iter_mut().enumerate() {
                    if let Some(x) = *v {
                        if x < fences.0 || x > fences.1 {
                            *v = None;
                            actions[i] = CleanAction::OutlierReplaced;
                        }
                    }
                }
                // With no survivor left the previous median stands and the
                // series becomes constant.
                let survivors: Vec<f64> = current.iter().flatten().copied().collect();
                if !survivors.is_empty() {
                    fill = median(&survivors);
                }
                let completed: Vec<f64> = current.iter().map(|v| v.unwrap_or(fill)).collect();
                fences = tukey_fences(&completed, policy.tukey_k);
                if !survivors.iter().any(|x| *x < fences.0 || *x > fences.1) {
                    return Ok((completed, actions));
                }
            }
        }
        CleaningMethod::Winsorize => {
            let mut series = current.clone();
            for _ in 0..=values.len() + 1 {
                let completed = complete(&series)?;
                let mut sorted = completed.clone();
                sorted.sort_by(f64::total_cmp);
                let n = sorted.len();
                let lo_idx = ((policy.winsor_lo / 100.0) * (n - 1) as f64).floor() as usize;
                let hi_idx = (((policy.winsor_hi / 100.0) * (n - 1) as f64).ceil() as usize).min(n - 1);
                let (lo, hi) = (sorted[lo_idx], sorted[hi_idx]);
                let mut changed = false;
                let mut next = Vec::with_capacity(n);
                for (i, x) in completed.iter().enumerate() {
                    let c = x.clamp(lo, hi);
                    if c != *x {
                        changed = true;
                        if actions[i] == CleanAction::Kept {
                            actions[i] = CleanAction::Clamped;
                        }
                    }
                    next.push(c);
                }
                if !changed && series.iter().all(Option::is_some) {
                    return Ok((next, actions));
                }
                series = next.into_iter().map(Some).collect();
            }
            Ok((complete(&series)?, actions))
        }
    }
}

fn tukey_fences(values: &[f64], k: f64) -> (f64, f64) {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_linear(&sorted, 0.25);
    let q3 = quantile_linear(&sorted, 0.75);
    (q1 - k * (q3 - q1), q3 + k * (q3 - q1))
}

/// Fill gaps with the median of the present values.
fn complete(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let present: Vec<f64> = series.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::Empty("no values survive cleaning".into()));
    }
    let fill = median(&present);
    Ok(series.iter().map(|v| v.unwrap_or(fill)).collect())
}

pub fn clean_series(values: &[Option<f64>], policy: &CleaningPolicy) -> Result<Vec<f64>> {
    clean_series_detailed(values, policy).map(|(v, _)| v)
}

/// One cultivated plot as surveyed. Expenditures are FCFA for the whole plot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PlotRecord {
    pub plot_id: String,
    pub household_id: HouseholdId,
    pub crop: ProductId,
    pub season: Season,
    pub area_ha: Option<f64>,
    pub production_kg: Option<f64>,
    pub seed: Option<f64>,
    pub fertilizer: Option<f64>,
    pub phyto: Option<f64>,
    pub equipment: Option<f64>,
    pub hired_labor: Option<f64>,
    pub other: Option<f64>,
    pub fertilizer_kg: Option<f64>,
    /// FCFA per kg
    pub sale_price: Option<f64>,
    /// Person-days of work on the plot.
    pub labor_days: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurveyHousehold {
    pub id: HouseholdId,
    pub region: RegionId,
    pub weight: Option<f64>,
    pub members: Option<f64>,
    pub adult_equivalents: Option<f64>,
    pub exog_income: Option<f64>,
    pub beneficiary: Option<bool>,
    pub declared_area_ha: Option<f64>,
    pub cash_multiplier: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConsumptionRecord {
    pub household_id: HouseholdId,
    pub crop: ProductId,
    pub kg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SurveyDataset {
    pub plots: Vec<PlotRecord>,
    pub households: Vec<SurveyHousehold>,
    pub consumption: Vec<ConsumptionRecord>,
}

const PLOT_COLUMNS: [&str; 15] = [
    "plot_id",
    "household_id",
    "crop",
    "season",
    "area_ha",
    "production_kg",
    "seed",
    "fertilizer",
    "phyto",
    "equipment",
    "hired_labor",
    "other",
    "fertilizer_kg",
    "sale_price",
    "labor_days",
];
const PLOT_MANDATORY: usize = 14;
const HOUSEHOLD_COLUMNS: [&str; 9] = [
    "household_id",
    "region",
    "weight",
    "members",
    "adult_equivalents",
    "exog_income",
    "beneficiary",
    "declared_area_ha",
    "cash_multiplier",
];
const HOUSEHOLD_MANDATORY: usize = 6;

struct Table {
    name: String,
    index: BTreeMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path, mandatory: &[&str]) -> Result<Table> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
        let index: BTreeMap<String, usize> = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_owned(), i))
            .collect();
        let name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        for col in mandatory {
            if !index.contains_key(*col) {
                return Err(Error::MissingColumn {
                    file: name,
                    column: (*col).to_owned(),
                });
            }
        }
        let rows = reader
            .records()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Ok(Table { name, index, rows })
    }

    fn text<'r>(&self, row: &'r csv::StringRecord, col: &str) -> &'r str {
        self.index
            .get(col)
            .and_then(|i| row.get(*i))
            .unwrap_or("")
    }

    fn num(&self, row: &csv::StringRecord, col: &str) -> Option<f64> {
        parse_number(self.text(row, col))
    }
}

/// Numeric cell; blanks and unparsable text count as missing.
pub fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_bool(cell: &str) -> Option<bool> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "oui" => Some(true),
        "0" | "false" | "no" | "non" => Some(false),
        _ => None,
    }
}

pub fn parse_season(cell: &str) -> Option<Season> {
    match cell.trim().to_ascii_lowercase().as_str() {
        "rainy" | "hivernage" => Some(Season::Rainy),
        "dry" | "contre_saison" | "saison_seche" => Some(Season::Dry),
        _ => None,
    }
}

/// Read `plots.csv`, `households.csv` and the optional `consumption.csv`.
pub fn load_survey(dir: &Path) -> Result<SurveyDataset> {
    let ht = Table::read(&dir.join("households.csv"), &HOUSEHOLD_COLUMNS[..HOUSEHOLD_MANDATORY])?;
    let mut households = Vec::with_capacity(ht.rows.len());
    let mut seen = BTreeSet::new();
    for row in &ht.rows {
        let id = HouseholdId::from(ht.text(row, "household_id"));
        if !seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        households.push(SurveyHousehold {
            id,
            region: RegionId::from(ht.text(row, "region")),
            weight: ht.num(row, "weight"),
            members: ht.num(row, "members"),
            adult_equivalents: ht.num(row, "adult_equivalents"),
            exog_income: ht.num(row, "exog_income"),
            beneficiary: parse_bool(ht.text(row, "beneficiary")),
            declared_area_ha: ht.num(row, "declared_area_ha"),
            cash_multiplier: ht.num(row, "cash_multiplier"),
        });
    }

    let pt = Table::read(&dir.join("plots.csv"), &PLOT_COLUMNS[..PLOT_MANDATORY])?;
    let mut plots = Vec::with_capacity(pt.rows.len());
    let mut plot_ids = BTreeSet::new();
    for (line, row) in pt.rows.iter().enumerate() {
        let plot_id = pt.text(row, "plot_id").to_owned();
        if !plot_ids.insert(plot_id.clone()) {
            return Err(Error::DuplicateId(plot_id));
        }
        let household_id = HouseholdId::from(pt.text(row, "household_id"));
        if !seen.contains(&household_id) {
            return Err(Error::InvalidInput(format!(
                "{} row {}: unknown household {household_id}",
                pt.name,
                line + 2
            )));
        }
        let season = parse_season(pt.text(row, "season")).ok_or_else(|| {
            Error::InvalidInput(format!(
                "{} row {}: unknown season `{}`",
                pt.name,
                line + 2,
                pt.text(row, "season")
            ))
        })?;
        plots.push(PlotRecord {
            plot_id,
            household_id,
            crop: ProductId::from(pt.text(row, "crop")),
            season,
            area_ha: pt.num(row, "area_ha"),
            production_kg: pt.num(row, "production_kg"),
            seed: pt.num(row, "seed"),
            fertilizer: pt.num(row, "fertilizer"),
            phyto: pt.num(row, "phyto"),
            equipment: pt.num(row, "equipment"),
            hired_labor: pt.num(row, "hired_labor"),
            other: pt.num(row, "other"),
            fertilizer_kg: pt.num(row, "fertilizer_kg"),
            sale_price: pt.num(row, "sale_price"),
            labor_days: pt.num(row, "labor_days"),
        });
    }

    let mut consumption = Vec::new();
    let cpath = dir.join("consumption.csv");
    if cpath.exists() {
        let ct = Table::read(&cpath, &["household_id", "crop", "kg"])?;
        for row in &ct.rows {
            consumption.push(ConsumptionRecord {
                household_id: HouseholdId::from(ct.text(row, "household_id")),
                crop: ProductId::from(ct.text(row, "crop")),
                kg: ct.num(row, "kg"),
            });
        }
    }
    Ok(SurveyDataset {
        plots,
        households,
        consumption,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write a dataset in the layout read by [`load_survey`].
pub fn write_survey(dir: &Path, data: &SurveyDataset) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("households.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(HOUSEHOLD_COLUMNS).map_err(|e| Error::csv(&path, e))?;
    for h in &data.households {
        w.write_record([
            h.id.to_string(),
            h.region.to_string(),
            fmt_opt(h.weight),
            fmt_opt(h.members),
            fmt_opt(h.adult_equivalents),
            fmt_opt(h.exog_income),
            h.beneficiary.map(|b| if b { "1" } else { "0" }.to_owned()).unwrap_or_default(),
            fmt_opt(h.declared_area_ha),
            fmt_opt(h.cash_multiplier),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("plots.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
    w.write_record(PLOT_COLUMNS).map_err(|e| Error::csv(&path, e))?;
    for p in &data.plots {
        w.write_record([
            p.plot_id.clone(),
            p.household_id.to_string(),
            p.crop.to_string(),
            p.season.as_str().to_owned(),
            fmt_opt(p.area_ha),
            fmt_opt(p.production_kg),
            fmt_opt(p.seed),
            fmt_opt(p.fertilizer),
            fmt_opt(p.phyto),
            fmt_opt(p.equipment),
            fmt_opt(p.hired_labor),
            fmt_opt(p.other),
            fmt_opt(p.fertilizer_kg),
            fmt_opt(p.sale_price),
            fmt_opt(p.labor_days),
        ])
        .map_err(|e| Error::csv(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if !data.consumption.is_empty() {
        let path = dir.join("consumption.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["household_id", "crop", "kg"]).map_err(|e| Error::csv(&path, e))?;
        for c in &data.consumption {
            w.write_record([c.household_id.to_string(), c.crop.to_string(), fmt_opt(c.kg)])
                .map_err(|e| Error::csv(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Crop catalog entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropInfo {
    pub category: ProductCategory,
    pub tradable: bool,
}

pub fn default_catalog() -> BTreeMap<ProductId, CropInfo> {
    use ProductCategory::*;
    let entries: [(&str, ProductCategory); 16] = [
        ("mil", Cereal),
        ("sorgho", Cereal),
        ("mais", Cereal),
        ("riz", Cereal),
        ("fonio", Cereal),
        ("manioc", RootTuber),
        ("patate", RootTuber),
        ("arachide", Legume),
        ("niebe", Legume),
        ("oignon", CashHorticulture),
        ("pasteque", CashHorticulture),
        ("tomate", CashHorticulture),
        ("aubergine", CashHorticulture),
        ("coton", CashOther),
        ("sesame", CashOther),
        ("cajou", CashOther),
    ];
    entries
        .into_iter()
        .map(|(k, c)| {
            (
                ProductId::from(k),
                CropInfo {
                    category: c,
                    tradable: true,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub fertilizer_price: f64,
    pub buy_markup: f64,
    pub sell_markdown: f64,
    /// Base-year subsidy applied to observed beneficiaries.
    pub base_rate: f64,
    pub base_quota_kg: f64,
    /// Cash endowment as a multiple of the cash the observed plan requires.
    pub cash_multiplier: f64,
    /// Family labor available per adult equivalent and season, person-days.
    pub labor_days_rainy: f64,
    pub labor_days_dry: f64,
    /// Used when plots carry no labor record, person-days per ha.
    pub default_labor_per_ha: f64,
    pub catalog: BTreeMap<ProductId, CropInfo>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            fertilizer_price: 300.0,
            buy_markup: 1.1,
            sell_markdown: 0.9,
            base_rate: 0.5,
            base_quota_kg: 150.0,
            cash_multiplier: 1.2,
            labor_days_rainy: 120.0,
            labor_days_dry: 80.0,
            default_labor_per_ha: 50.0,
            catalog: default_catalog(),
        }
    }
}

/// A row of the cleaning report.
#[derive(Debug, Clone, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct CleaningRecord {
    pub household: String,
    pub plot: String,
    pub field: String,
    pub raw_value: Option<f64>,
    pub clean_value: f64,
    pub action: String,
}

/// Per-ha plot values after cleaning.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPlot {
    pub plot_id: String,
    pub household_id: HouseholdId,
    pub region: RegionId,
    pub crop: ProductId,
    pub season: Season,
    pub area_ha: f64,
    pub yield_per_ha: f64,
    /// seed, fertilizer, phyto, equipment, hired_labor, other, in FCFA per ha
    pub costs: [f64; 6],
    pub fertilizer_kg_per_ha: f64,
    pub sale_price: f64,
    pub labor_per_ha: Option<f64>,
}

const PER_HA_FIELDS: [&str; 10] = [
    "yield",
    "seed",
    "fertilizer",
    "phyto",
    "equipment",
    "hired_labor",
    "other",
    "fertilizer_kg",
    "sale_price",
    "labor_days",
];

fn per_ha(p: &PlotRecord, area: Option<f64>) -> [Option<f64>; 10] {
    let div = |v: Option<f64>| match (v, area) {
        (Some(v), Some(a)) if a > 0.0 => Some(v / a),
        _ => None,
    };
    [
        div(p.production_kg),
        div(p.seed),
        div(p.fertilizer),
        div(p.phyto),
        div(p.equipment),
        div(p.hired_labor),
        div(p.other),
        div(p.fertilizer_kg),
        p.sale_price,
        div(p.labor_days),
    ]
}

/// Clean every per-ha field within its group and impute missing areas.
pub fn clean_plots(
    data: &SurveyDataset,
    policy: &CleaningPolicy,
) -> Result<(Vec<CleanPlot>, Vec<CleaningRecord>, Vec<Diagnostic>)> {
    policy.validate()?;
    if data.plots.is_empty() {
        return Err(Error::Empty("survey has no plots".into()));
    }
    let region: BTreeMap<&HouseholdId, &RegionId> =
        data.households.iter().map(|h| (&h.id, &h.region)).collect();
    let group_key = |p: &PlotRecord| -> (ProductId, String) {
        let r = match policy.group {
            CleaningGroup::CropRegion => region.get(&p.household_id).map(|r| r.to_string()).unwrap_or_default(),
            CleaningGroup::Crop => String::new(),
        };
        (p.crop.clone(), r)
    };

    let mut report = Vec::new();
    let mut diagnostics = Vec::new();
    let n = data.plots.len();

    // Areas are decision variables: missing ones take the group median, but
    // observed areas are never treated as outliers.
    let mut areas: Vec<Option<f64>> = data.plots.iter().map(|p| p.area_ha.filter(|a| *a > 0.0)).collect();
    let mut by_group: BTreeMap<(ProductId, String), Vec<usize>> = BTreeMap::new();
    let mut by_crop: BTreeMap<ProductId, Vec<usize>> = BTreeMap::new();
    for (i, p) in data.plots.iter().enumerate() {
        by_group.entry(group_key(p)).or_default().push(i);
        by_crop.entry(p.crop.clone()).or_default().push(i);
    }
    let crop_area_median: BTreeMap<ProductId, Option<f64>> = by_crop
        .iter()
        .map(|(c, idx)| {
            let v: Vec<f64> = idx.iter().filter_map(|i| areas[*i]).collect();
            (c.clone(), if v.is_empty() { None } else { Some(median(&v)) })
        })
        .collect();
    for idx in by_group.values() {
        let v: Vec<f64> = idx.iter().filter_map(|i| areas[*i]).collect();
        let fill = if v.is_empty() {
            crop_area_median[&data.plots[idx[0]].crop]
        } else {
            Some(median(&v))
        };
        for &i in idx {
            if areas[i].is_none() {
                let p = &data.plots[i];
                let Some(f) = fill else {
                    return Err(Error::InvalidInput(format!("crop {}: no plot area observed", p.crop)));
                };
                areas[i] = Some(f);
                report.push(CleaningRecord {
                    household: p.household_id.to_string(),
                    plot: p.plot_id.clone(),
                    field: "area_ha".into(),
                    raw_value: p.area_ha,
                    clean_value: f,
                    action: CleanAction::Imputed.as_str().into(),
                });
            }
        }
    }

    let raw: Vec<[Option<f64>; 10]> = data.plots.iter().zip(&areas).map(|(p, a)| per_ha(p, *a)).collect();
    let mut clean = vec![[0.0f64; 10]; n];
    let mut labor_known = vec![false; n];
    for (f, field) in PER_HA_FIELDS.iter().enumerate() {
        // Crop-level fallback for groups where a field was never observed.
        let mut crop_fallback: BTreeMap<ProductId, Option<f64>> = BTreeMap::new();
        for (crop, idx) in &by_crop {
            let vals: Vec<Option<f64>> = idx.iter().map(|i| raw[*i][f]).collect();
            crop_fallback.insert(crop.clone(), clean_series(&vals, policy).ok().map(|v| median(&v)));
        }
        for (key, idx) in &by_group {
            let vals: Vec<Option<f64>> = idx.iter().map(|i| raw[*i][f]).collect();
            let (cleaned, actions) = match clean_series_detailed(&vals, policy) {
                Ok(r) => r,
                Err(_) => {
                    let fill = match crop_fallback[&key.0] {
                        Some(v) => v,
                        None if *field == "sale_price" => {
                            return Err(Error::InvalidInput(format!("crop {}: no sale price observed", key.0)));
                        }
                        None => {
                            if *field != "labor_days" {
                                diagnostics.push(Diagnostic::new(
                                    format!("crop {}", key.0),
                                    format!("{field} never observed; set to 0"),
                                ));
                            }
                            0.0
                        }
                    };
                    (vec![fill; idx.len()], vec![CleanAction::Imputed; idx.len()])
                }
            };
            for ((&i, v), a) in idx.iter().zip(cleaned).zip(actions) {
                clean[i][f] = v;
                if *field == "labor_days" {
                    labor_known[i] = crop_fallback[&key.0].is_some();
                }
                if a != CleanAction::Kept && !(*field == "labor_days" && crop_fallback[&key.0].is_none()) {
                    let p = &data.plots[i];
                    report.push(CleaningRecord {
                        household: p.household_id.to_string(),
                        plot: p.plot_id.clone(),
                        field: (*field).to_owned(),
                        raw_value: raw[i][f],
                        clean_value: v,
                        action: a.as_str().into(),
                    });
                }
            }
        }
    }

    let plots = data
        .plots
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = &clean[i];
            CleanPlot {
                plot_id: p.plot_id.clone(),
                household_id: p.household_id.clone(),
                region: region.get(&p.household_id).map(|r| (*r).clone()).unwrap_or_default(),
                crop: p.crop.clone(),
                season: p.season,
                area_ha: areas[i].expect("imputed"),
                yield_per_ha: c[0].max(0.0),
                costs: [c[1], c[2], c[3], c[4], c[5], c[6]].map(|v| v.max(0.0)),
                fertilizer_kg_per_ha: c[7].max(0.0),
                sale_price: c[8].max(0.0),
                labor_per_ha: if labor_known[i] { Some(c[9].max(0.0)) } else { None },
            }
        })
        .collect();
    report.sort_by(|a, b| {
        (&a.household, &a.plot, &a.field).cmp(&(&b.household, &b.plot, &b.field))
    });
    Ok((plots, report, diagnostics))
}

/// Per-ha expenditure profiles used for practice clustering.
pub fn practice_observations(plots: &[CleanPlot]) -> Vec<crate::typology::PracticeObservation> {
    plots
        .iter()
        .map(|p| crate::typology::PracticeObservation {
            plot_id: p.plot_id.clone(),
            crop: p.crop.clone(),
            expenditures: [p.costs[0], p.costs[1], p.costs[2], p.costs[3], p.costs[4]],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub model: ModelInstance,
    pub report: Vec<CleaningRecord>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Assemble households and activities from the survey.
///
/// Activity coefficients are area-weighted means over the plots of each
/// crop, practice and season cell. Plots without a practice label are
/// treated as extensive.
pub fn build_households(
    data: &SurveyDataset,
    cleaning: &CleaningPolicy,
    practice_labels: &BTreeMap<String, Practice>,
    options: &BuildOptions,
) -> Result<BuildOutput> {
    let (plots, report, mut diagnostics) = clean_plots(data, cleaning)?;
    build_from_clean(data, &plots, report, &mut diagnostics, practice_labels, options)
}

pub fn build_from_clean(
    data: &SurveyDataset,
    plots: &[CleanPlot],
    report: Vec<CleaningRecord>,
    diagnostics: &mut Vec<Diagnostic>,
    practice_labels: &BTreeMap<String, Practice>,
    options: &BuildOptions,
) -> Result<BuildOutput> {
    if plots.is_empty() {
        return Err(Error::Empty("survey has no plots".into()));
    }
    let practice_of = |p: &CleanPlot| practice_labels.get(&p.plot_id).copied().unwrap_or(Practice::Extensive);

    // Activity cells.
    #[derive(Default)]
    struct Cell {
        area: f64,
        production: f64,
        costs: [f64; 6],
        fert_kg: f64,
        labor: f64,
        labor_area: f64,
    }
    let mut cells: BTreeMap<ActivityId, (ProductId, Practice, Season, Cell)> = BTreeMap::new();
    for p in plots {
        let practice = practice_of(p);
        let id = Activity::standard_id(&p.crop, practice, p.season);
        let entry = cells
            .entry(id)
            .or_insert_with(|| (p.crop.clone(), practice, p.season, Cell::default()));
        let c = &mut entry.3;
        c.area += p.area_ha;
        c.production += p.area_ha * p.yield_per_ha;
        for k in 0..6 {
            c.costs[k] += p.area_ha * p.costs[k];
        }
        c.fert_kg += p.area_ha * p.fertilizer_kg_per_ha;
        if let Some(l) = p.labor_per_ha {
            c.labor += p.area_ha * l;
            c.labor_area += p.area_ha;
        }
    }
    let pf = options.fertilizer_price;
    let mut activities = Vec::new();
    for (id, (crop, practice, season, c)) in &cells {
        let a = c.area;
        let fert_kg = c.fert_kg / a;
        activities.push(Activity {
            id: id.clone(),
            product: crop.clone(),
            practice: *practice,
            season: *season,
            yield_per_ha: c.production / a,
            input_costs: InputCosts {
                seed: c.costs[0] / a,
                // Valued at the market price so the activity is consistent
                // with the fertilizer purchases of the household model.
                fertilizer: fert_kg * pf,
                phyto: c.costs[2] / a,
                equipment: c.costs[3] / a,
                hired_labor: c.costs[4] / a,
                other: c.costs[5] / a,
            },
            fertilizer_qty: fert_kg,
            labor_req: if c.labor_area > 0.0 {
                c.labor / c.labor_area
            } else {
                options.default_labor_per_ha
            },
            subsidy_eligible_fertilizer: true,
            production_subsidy: 0.0,
        });
    }

    // Products and prices.
    let mut crops: BTreeMap<ProductId, (f64, f64)> = BTreeMap::new();
    for p in plots {
        let q = p.area_ha * p.yield_per_ha;
        let e = crops.entry(p.crop.clone()).or_insert((0.0, 0.0));
        // Production-weighted mean price; area-weighted if nothing produced.
        let w = if q > 0.0 { q } else { 1e-9 * p.area_ha };
        e.0 += w * p.sale_price;
        e.1 += w;
    }
    let mut products = Vec::new();
    let mut prices = PriceSystem {
        fertilizer_market_price: pf,
        ..Default::default()
    };
    for (crop, (pw, w)) in &crops {
        let info = options
            .catalog
            .get(crop)
            .ok_or_else(|| Error::InvalidInput(format!("crop {crop} missing from the catalog")))?;
        products.push(Product {
            id: crop.clone(),
            name: crop.to_string(),
            category: info.category,
            tradable: info.tradable,
        });
        prices.products.insert(
            crop.clone(),
            ProductPrice {
                market: if *w > 0.0 { pw / w } else { 0.0 },
                buy_markup: options.buy_markup,
                sell_markdown: options.sell_markdown,
            },
        );
    }

    // Households.
    let mut by_household: BTreeMap<&HouseholdId, Vec<&CleanPlot>> = BTreeMap::new();
    for p in plots {
        by_household.entry(&p.household_id).or_default().push(p);
    }
    let mut consumption: BTreeMap<&HouseholdId, BTreeMap<ProductId, f64>> = BTreeMap::new();
    let mut unpriced = BTreeSet::new();
    for c in &data.consumption {
        if !prices.products.contains_key(&c.crop) {
            // Nobody grows it, so the survey carries no price for it.
            unpriced.insert(c.crop.clone());
            continue;
        }
        if let Some(kg) = c.kg.filter(|k| *k > 0.0) {
            *consumption
                .entry(&c.household_id)
                .or_default()
                .entry(c.crop.clone())
                .or_insert(0.0) += kg;
        }
    }
    for crop in unpriced {
        diagnostics.push(Diagnostic::new(
            format!("crop {crop}"),
            "consumed but never grown; no price, left out of consumption",
        ));
    }
    let act_index: BTreeMap<&ActivityId, &Activity> = activities.iter().map(|a| (&a.id, a)).collect();
    let mut households = Vec::new();
    for sh in &data.households {
        let Some(hp) = by_household.get(&sh.id) else {
            diagnostics.push(Diagnostic::new(
                format!("household {}", sh.id),
                "no cultivated plots; excluded",
            ));
            continue;
        };
        let mut levels: BTreeMap<ActivityId, f64> = BTreeMap::new();
        let mut used = PerSeason::default();
        for p in hp {
            let id = Activity::standard_id(&p.crop, practice_of(p), p.season);
            *levels.entry(id).or_insert(0.0) += p.area_ha;
            *used.get_mut(p.season) += p.area_ha;
        }
        let ae = sh.adult_equivalents.or(sh.members).unwrap_or(1.0).max(0.0);
        let beneficiary = sh.beneficiary.unwrap_or(false);
        let mut cash_need = 0.0;
        let mut fert = 0.0;
        let mut labor = PerSeason::default();
        for (id, x) in &levels {
            let a = act_index[id];
            cash_need += a.input_costs.cash_non_fertilizer() * x;
            fert += a.fertilizer_qty * x;
            *labor.get_mut(a.season) += a.labor_req * x;
        }
        let subsidized = if beneficiary { fert.min(options.base_quota_kg) } else { 0.0 };
        cash_need += (1.0 - options.base_rate) * pf * subsidized + pf * (fert - subsidized);
        let multiplier = sh.cash_multiplier.unwrap_or(options.cash_multiplier).max(1.0);
        let declared = sh.declared_area_ha.unwrap_or(0.0);
        households.push(Household {
            id: sh.id.clone(),
            region: sh.region.clone(),
            weight: sh.weight.unwrap_or(1.0).max(0.0),
            land: PerSeason::new(used.rainy.max(declared), used.dry),
            labor: PerSeason::new(
                (ae * options.labor_days_rainy).max(labor.rainy),
                (ae * options.labor_days_dry).max(labor.dry),
            ),
            cash_endowment: cash_need * multiplier,
            exog_income: sh.exog_income.unwrap_or(0.0),
            observed_levels: levels,
            observed_consumption: consumption.remove(&sh.id).unwrap_or_default(),
            adult_equivalents: ae,
            base_beneficiary: beneficiary,
        });
    }
    if households.is_empty() {
        return Err(Error::Empty("no agricultural households".into()));
    }
    diagnostics.sort();
    Ok(BuildOutput {
        model: ModelInstance {
            manifest: ModelManifest::default(),
            products,
            activities,
            households,
            prices,
        },
        report,
        diagnostics: diagnostics.clone(),
    })
}
