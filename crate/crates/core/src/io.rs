//! On-disk formats: model directories and calibration artifacts.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{ActivityCalibration, ElasticityCheck, HouseholdCalibration, LesParameters};
use crate::error::{Error, Result};
use crate::types::{
    Activity, ActivityId, HouseholdId, Household, InputCosts, ModelInstance, ModelManifest,
    PerSeason, Practice, PriceSystem, Product, ProductCategory, ProductId, ProductPrice, RegionId,
    Season,
};

pub const SCHEMA_VERSION: u32 = 1;

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Write a CSV that has a header even when there are no rows.
fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    if !rows.is_empty() {
        return write_csv(path, rows);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    w.write_record(header).map_err(|e| Error::csv(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::csv(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

#[derive(Serialize, Deserialize)]
struct ProductRow {
    id: ProductId,
    name: String,
    category: ProductCategory,
    tradable: bool,
}

#[derive(Serialize, Deserialize)]
struct ActivityRow {
    id: ActivityId,
    product: ProductId,
    practice: Practice,
    season: Season,
    yield_per_ha: f64,
    seed: f64,
    fertilizer: f64,
    phyto: f64,
    equipment: f64,
    hired_labor: f64,
    other: f64,
    fertilizer_qty: f64,
    labor_req: f64,
    subsidy_eligible_fertilizer: bool,
    production_subsidy: f64,
}

#[derive(Serialize, Deserialize)]
struct HouseholdRow {
    id: HouseholdId,
    region: RegionId,
    weight: f64,
    land_rainy: f64,
    land_dry: f64,
    labor_rainy: f64,
    labor_dry: f64,
    cash_endowment: f64,
    exog_income: f64,
    adult_equivalents: f64,
    base_beneficiary: bool,
}

#[derive(Serialize, Deserialize)]
struct LevelRow {
    household: HouseholdId,
    activity: ActivityId,
    level: f64,
}

#[derive(Serialize, Deserialize)]
struct ConsumptionRow {
    household: HouseholdId,
    product: ProductId,
    kg: f64,
}

#[derive(Serialize, Deserialize)]
struct PriceRow {
    product: ProductId,
    market: f64,
    buy_markup: f64,
    sell_markdown: f64,
}

#[derive(Serialize, Deserialize)]
struct InputPriceRow {
    name: String,
    price: f64,
}

const FERTILIZER: &str = "fertilizer";
const FACTOR_PREFIX: &str = "factor:";

/// Write a model directory.
pub fn write_model(dir: &Path, model: &ModelInstance) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join("manifest.json"), &model.manifest)?;
    let products: Vec<ProductRow> = model
        .products
        .iter()
        .map(|p| ProductRow {
            id: p.id.clone(),
            name: p.name.clone(),
            category: p.category,
            tradable: p.tradable,
        })
        .collect();
    write_csv_with_header(&dir.join("products.csv"), &["id", "name", "category", "tradable"], &products)?;
    let activities: Vec<ActivityRow> = model
        .activities
        .iter()
        .map(|a| ActivityRow {
            id: a.id.clone(),
            product: a.product.clone(),
            practice: a.practice,
            season: a.season,
            yield_per_ha: a.yield_per_ha,
            seed: a.input_costs.seed,
            fertilizer: a.input_costs.fertilizer,
            phyto: a.input_costs.phyto,
            equipment: a.input_costs.equipment,
            hired_labor: a.input_costs.hired_labor,
            other: a.input_costs.other,
            fertilizer_qty: a.fertilizer_qty,
            labor_req: a.labor_req,
            subsidy_eligible_fertilizer: a.subsidy_eligible_fertilizer,
            production_subsidy: a.production_subsidy,
        })
        .collect();
    write_csv_with_header(
        &dir.join("activities.csv"),
        &[
            "id", "product", "practice", "season", "yield_per_ha", "seed", "fertilizer", "phyto",
            "equipment", "hired_labor", "other", "fertilizer_qty", "labor_req",
            "subsidy_eligible_fertilizer", "production_subsidy",
        ],
        &activities,
    )?;
    let households: Vec<HouseholdRow> = model
        .households
        .iter()
        .map(|h| HouseholdRow {
            id: h.id.clone(),
            region: h.region.clone(),
            weight: h.weight,
            land_rainy: h.land.rainy,
            land_dry: h.land.dry,
            labor_rainy: h.labor.rainy,
            labor_dry: h.labor.dry,
            cash_endowment: h.cash_endowment,
            exog_income: h.exog_income,
            adult_equivalents: h.adult_equivalents,
            base_beneficiary: h.base_beneficiary,
        })
        .collect();
    write_csv_with_header(
        &dir.join("households.csv"),
        &[
            "id", "region", "weight", "land_rainy", "land_dry", "labor_rainy", "labor_dry",
            "cash_endowment", "exog_income", "adult_equivalents", "base_beneficiary",
        ],
        &households,
    )?;
    let mut levels = Vec::new();
    let mut consumption = Vec::new();
    for h in &model.households {
        for (a, x) in &h.observed_levels {
            levels.push(LevelRow {
                household: h.id.clone(),
                activity: a.clone(),
                level: *x,
            });
        }
        for (p, c) in &h.observed_consumption {
            consumption.push(ConsumptionRow {
                household: h.id.clone(),
                product: p.clone(),
                kg: *c,
            });
        }
    }
    write_csv_with_header(&dir.join("observed_levels.csv"), &["household", "activity", "level"], &levels)?;
    write_csv_with_header(
        &dir.join("observed_consumption.csv"),
        &["household", "product", "kg"],
        &consumption,
    )?;
    let prices: Vec<PriceRow> = model
        .prices
        .products
        .iter()
        .map(|(id, p)| PriceRow {
            product: id.clone(),
            market: p.market,
            buy_markup: p.buy_markup,
            sell_markdown: p.sell_markdown,
        })
        .collect();
    write_csv_with_header(
        &dir.join("prices.csv"),
        &["product", "market", "buy_markup", "sell_markdown"],
        &prices,
    )?;
    let mut inputs = vec![InputPriceRow {
        name: FERTILIZER.into(),
        price: model.prices.fertilizer_market_price,
    }];
    inputs.extend(model.prices.factor_prices.iter().map(|(k, v)| InputPriceRow {
        name: format!("{FACTOR_PREFIX}{k}"),
        price: *v,
    }));
    write_csv(&dir.join("input_prices.csv"), &inputs)
}

/// Read a model directory written by [`write_model`].
pub fn read_model(dir: &Path) -> Result<ModelInstance> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::InvalidInput(format!(
            "model schema version {} is not supported",
            manifest.schema_version
        )));
    }
    let products = read_csv::<ProductRow>(&dir.join("products.csv"))?
        .into_iter()
        .map(|r| Product {
            id: r.id,
            name: r.name,
            category: r.category,
            tradable: r.tradable,
        })
        .collect();
    let activities = read_csv::<ActivityRow>(&dir.join("activities.csv"))?
        .into_iter()
        .map(|r| Activity {
            id: r.id,
            product: r.product,
            practice: r.practice,
            season: r.season,
            yield_per_ha: r.yield_per_ha,
            input_costs: InputCosts {
                seed: r.seed,
                fertilizer: r.fertilizer,
                phyto: r.phyto,
                equipment: r.equipment,
                hired_labor: r.hired_labor,
                other: r.other,
            },
            fertilizer_qty: r.fertilizer_qty,
            labor_req: r.labor_req,
            subsidy_eligible_fertilizer: r.subsidy_eligible_fertilizer,
            production_subsidy: r.production_subsidy,
        })
        .collect();
    let mut households: Vec<Household> = Vec::new();
    let mut index = BTreeMap::new();
    for r in read_csv::<HouseholdRow>(&dir.join("households.csv"))? {
        if index.insert(r.id.clone(), households.len()).is_some() {
            return Err(Error::DuplicateId(r.id.to_string()));
        }
        households.push(Household {
            id: r.id,
            region: r.region,
            weight: r.weight,
            land: PerSeason::new(r.land_rainy, r.land_dry),
            labor: PerSeason::new(r.labor_rainy, r.labor_dry),
            cash_endowment: r.cash_endowment,
            exog_income: r.exog_income,
            observed_levels: BTreeMap::new(),
            observed_consumption: BTreeMap::new(),
            adult_equivalents: r.adult_equivalents,
            base_beneficiary: r.base_beneficiary,
        });
    }
    let lookup = |id: &HouseholdId, file: &str| {
        index
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("{file}: unknown household {id}")))
    };
    for r in read_csv::<LevelRow>(&dir.join("observed_levels.csv"))? {
        let i = lookup(&r.household, "observed_levels.csv")?;
        households[i].observed_levels.insert(r.activity, r.level);
    }
    let cpath = dir.join("observed_consumption.csv");
    if cpath.exists() {
        for r in read_csv::<ConsumptionRow>(&cpath)? {
            let i = lookup(&r.household, "observed_consumption.csv")?;
            households[i].observed_consumption.insert(r.product, r.kg);
        }
    }
    let mut prices = PriceSystem::default();
    for r in read_csv::<PriceRow>(&dir.join("prices.csv"))? {
        prices.products.insert(
            r.product,
            ProductPrice {
                market: r.market,
                buy_markup: r.buy_markup,
                sell_markdown: r.sell_markdown,
            },
        );
    }
    let mut fertilizer = None;
    for r in read_csv::<InputPriceRow>(&dir.join("input_prices.csv"))? {
        if r.name == FERTILIZER {
            fertilizer = Some(r.price);
        } else if let Some(k) = r.name.strip_prefix(FACTOR_PREFIX) {
            prices.factor_prices.insert(k.to_owned(), r.price);
        }
    }
    prices.fertilizer_market_price = fertilizer
        .ok_or_else(|| Error::InvalidInput("input_prices.csv: no fertilizer price".into()))?;
    Ok(ModelInstance {
        manifest,
        products,
        activities,
        households,
        prices,
    })
}

#[derive(Serialize, Deserialize)]
struct CalibrationRow {
    household: HouseholdId,
    group: String,
    activity: ActivityId,
    observed: f64,
    gross_margin: f64,
    d: f64,
    q: f64,
    residual: f64,
    alternative: bool,
    margin_shift: f64,
    iterations: usize,
}

#[derive(Serialize, Deserialize)]
struct CrossTermRow {
    household: HouseholdId,
    row: ActivityId,
    col: ActivityId,
    q: f64,
}

#[derive(Serialize, Deserialize)]
struct DualRow {
    household: HouseholdId,
    constraint: String,
    value: f64,
}

#[derive(Serialize, Deserialize)]
struct ElasticityRow {
    household: HouseholdId,
    activity: ActivityId,
    target: f64,
    simulated: f64,
    corner: bool,
    relative_error: f64,
}

#[derive(Serialize, Deserialize)]
struct LesRow {
    household: HouseholdId,
    product: ProductId,
    beta: f64,
    gamma: f64,
    budget_share: f64,
}

/// Write `calibration.csv`, `cross_terms.csv`, `duals.csv`,
/// `elasticities.csv` and `les.csv`.
pub fn write_calibration(dir: &Path, cals: &BTreeMap<HouseholdId, HouseholdCalibration>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::new();
    let mut cross = Vec::new();
    let mut duals = Vec::new();
    let mut elas = Vec::new();
    let mut les = Vec::new();
    for (id, cal) in cals {
        let mut reported: Vec<&ActivityCalibration> = cal.report.iter().collect();
        reported.sort_by(|a, b| a.activity.cmp(&b.activity));
        for act in cal.behavioral.linear.keys() {
            let r = reported.iter().find(|r| &r.activity == act);
            rows.push(CalibrationRow {
                household: id.clone(),
                group: cal.group.clone(),
                activity: act.clone(),
                observed: r.map(|r| r.observed).unwrap_or(0.0),
                gross_margin: r.map(|r| r.gross_margin).unwrap_or(0.0),
                d: cal.behavioral.d(act),
                q: cal.behavioral.q_diag(act),
                residual: r.map(|r| r.residual).unwrap_or(0.0),
                alternative: r.map(|r| r.alternative).unwrap_or(false),
                margin_shift: cal.margin_shift.get(act).copied().unwrap_or(0.0),
                iterations: cal.iterations,
            });
        }
        for ((a, b), q) in &cal.behavioral.quadratic {
            if a != b {
                cross.push(CrossTermRow {
                    household: id.clone(),
                    row: a.clone(),
                    col: b.clone(),
                    q: *q,
                });
            }
        }
        for (k, v) in &cal.duals {
            duals.push(DualRow {
                household: id.clone(),
                constraint: k.clone(),
                value: *v,
            });
        }
        for e in &cal.elasticities {
            elas.push(ElasticityRow {
                household: e.household.clone(),
                activity: e.activity.clone(),
                target: e.target,
                simulated: e.simulated,
                corner: e.corner,
                relative_error: e.relative_error(),
            });
        }
        if let Some(l) = &cal.les {
            for (p, beta) in &l.beta {
                les.push(LesRow {
                    household: id.clone(),
                    product: p.clone(),
                    beta: *beta,
                    gamma: l.gamma.get(p).copied().unwrap_or(0.0),
                    budget_share: l.budget_share,
                });
            }
        }
    }
    write_csv_with_header(
        &dir.join("calibration.csv"),
        &[
            "household", "group", "activity", "observed", "gross_margin", "d", "q", "residual",
            "alternative", "margin_shift", "iterations",
        ],
        &rows,
    )?;
    write_csv_with_header(&dir.join("cross_terms.csv"), &["household", "row", "col", "q"], &cross)?;
    write_csv_with_header(&dir.join("duals.csv"), &["household", "constraint", "value"], &duals)?;
    write_csv_with_header(
        &dir.join("elasticities.csv"),
        &["household", "activity", "target", "simulated", "corner", "relative_error"],
        &elas,
    )?;
    write_csv_with_header(
        &dir.join("les.csv"),
        &["household", "product", "beta", "gamma", "budget_share"],
        &les,
    )
}

/// Read the files written by [`write_calibration`].
pub fn read_calibration(dir: &Path) -> Result<BTreeMap<HouseholdId, HouseholdCalibration>> {
    let mut out: BTreeMap<HouseholdId, HouseholdCalibration> = BTreeMap::new();
    for r in read_csv::<CalibrationRow>(&dir.join("calibration.csv"))? {
        let cal = out.entry(r.household.clone()).or_insert_with(|| HouseholdCalibration {
            household: r.household.clone(),
            group: r.group.clone(),
            iterations: r.iterations,
            ..Default::default()
        });
        cal.behavioral.linear.insert(r.activity.clone(), r.d);
        cal.behavioral.set_diag(&r.activity, r.q);
        if r.margin_shift != 0.0 || r.alternative {
            cal.margin_shift.insert(r.activity.clone(), r.margin_shift);
        }
        cal.report.push(ActivityCalibration {
            activity: r.activity,
            observed: r.observed,
            gross_margin: r.gross_margin,
            d: r.d,
            q: r.q,
            residual: r.residual,
            alternative: r.alternative,
        });
    }
    let known = |out: &BTreeMap<HouseholdId, HouseholdCalibration>, h: &HouseholdId, file: &str| {
        if out.contains_key(h) {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("{file}: unknown household {h}")))
        }
    };
    let path = dir.join("cross_terms.csv");
    if path.exists() {
        for r in read_csv::<CrossTermRow>(&path)? {
            known(&out, &r.household, "cross_terms.csv")?;
            out.get_mut(&r.household)
                .expect("checked")
                .behavioral
                .quadratic
                .insert((r.row, r.col), r.q);
        }
    }
    for r in read_csv::<DualRow>(&dir.join("duals.csv"))? {
        known(&out, &r.household, "duals.csv")?;
        out.get_mut(&r.household).expect("checked").duals.insert(r.constraint, r.value);
    }
    for r in read_csv::<ElasticityRow>(&dir.join("elasticities.csv"))? {
        known(&out, &r.household, "elasticities.csv")?;
        out.get_mut(&r.household).expect("checked").elasticities.push(ElasticityCheck {
            household: r.household.clone(),
            activity: r.activity,
            target: r.target,
            simulated: r.simulated,
            corner: r.corner,
        });
    }
    let path = dir.join("les.csv");
    if path.exists() {
        for r in read_csv::<LesRow>(&path)? {
            known(&out, &r.household, "les.csv")?;
            let les = out
                .get_mut(&r.household)
                .expect("checked")
                .les
                .get_or_insert_with(LesParameters::default);
            les.beta.insert(r.product.clone(), r.beta);
            les.gamma.insert(r.product, r.gamma);
            les.budget_share = r.budget_share;
        }
    }
    Ok(out)
}
