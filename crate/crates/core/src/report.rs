//! Weighted indicator tables, scenario comparison, income curves and
//! cost-benefit summaries.
//!
//! All sums run over households in id order so reports are bit-stable.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::typology::FarmClass;
use crate::types::{Household, HouseholdId, ModelInstance, ProductId, Solution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupBy {
    National,
    Region,
    SizeClass,
    Specialization,
    Crop,
}

impl GroupBy {
    pub const ALL: [GroupBy; 5] = [
        GroupBy::National,
        GroupBy::Region,
        GroupBy::SizeClass,
        GroupBy::Specialization,
        GroupBy::Crop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupBy::National => "national",
            GroupBy::Region => "region",
            GroupBy::SizeClass => "size_class",
            GroupBy::Specialization => "specialization",
            GroupBy::Crop => "crop",
        }
    }

    pub fn parse(s: &str) -> Option<GroupBy> {
        GroupBy::ALL.into_iter().find(|g| g.as_str() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRow {
    pub group: String,
    pub indicator: String,
    /// `None` when the cell is undefined, such as a yield on zero area.
    pub value: Option<f64>,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorTable {
    pub group_by: GroupBy,
    pub rows: Vec<IndicatorRow>,
}

impl IndicatorTable {
    pub fn get(&self, group: &str, indicator: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.group == group && r.indicator == indicator)
            .and_then(|r| r.value)
    }

    pub fn groups(&self) -> Vec<&str> {
        let mut g: Vec<&str> = self.rows.iter().map(|r| r.group.as_str()).collect();
        g.dedup();
        g
    }

    /// CSV with masses rendered in tonnes.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["group_by", "group", "indicator", "value", "unit"])?;
        for r in &self.rows {
            let (value, unit) = render(r);
            w.write_record([self.group_by.as_str(), &r.group, &r.indicator, &value, &unit])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn render(row: &IndicatorRow) -> (String, String) {
    match (row.value, row.unit.as_str()) {
        (Some(v), "kg") if row.indicator == "production" => (format!("{}", v / 1000.0), "t".into()),
        (Some(v), u) => (format!("{v}"), u.to_owned()),
        (None, u) => (String::new(), u.to_owned()),
    }
}

#[derive(Default, Clone)]
struct GroupAcc {
    weight: f64,
    area: f64,
    fert: f64,
    farm_income: f64,
    total_income: f64,
    beneficiaries: f64,
    outlay: f64,
    crop_area: BTreeMap<ProductId, f64>,
}

#[derive(Default, Clone)]
struct CropAcc {
    area: f64,
    production: f64,
    fert: f64,
}

fn household_group(
    h: &Household,
    classes: &BTreeMap<HouseholdId, FarmClass>,
    group_by: GroupBy,
) -> Result<String> {
    Ok(match group_by {
        GroupBy::National => "national".to_owned(),
        GroupBy::Region => h.region.to_string(),
        GroupBy::SizeClass | GroupBy::Specialization => {
            let c = classes.get(&h.id).ok_or_else(|| {
                Error::InvalidInput(format!("household {} has no farm class", h.id))
            })?;
            if group_by == GroupBy::SizeClass {
                c.size.as_str().to_owned()
            } else {
                c.specialization.as_str().to_owned()
            }
        }
        GroupBy::Crop => unreachable!("crop grouping is per activity"),
    })
}

fn row(group: &str, indicator: &str, value: Option<f64>, unit: &str) -> IndicatorRow {
    IndicatorRow {
        group: group.to_owned(),
        indicator: indicator.to_owned(),
        value,
        unit: unit.to_owned(),
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    if den > 0.0 {
        Some(num / den)
    } else {
        None
    }
}

/// Aggregate solutions with survey weights.
///
/// `classes` is only consulted for size-class and specialization grouping.
pub fn aggregate(
    results: &BTreeMap<HouseholdId, Solution>,
    model: &ModelInstance,
    classes: &BTreeMap<HouseholdId, FarmClass>,
    group_by: GroupBy,
) -> Result<IndicatorTable> {
    let mut households: Vec<&Household> = model
        .households
        .iter()
        .filter(|h| results.contains_key(&h.id))
        .collect();
    households.sort_by(|a, b| a.id.cmp(&b.id));
    let acts = model.activity_map();
    let mut rows = Vec::new();

    if group_by == GroupBy::Crop {
        let mut crops: BTreeMap<ProductId, CropAcc> = BTreeMap::new();
        let mut total_area = 0.0;
        for h in &households {
            let s = &results[&h.id];
            for (id, x) in &s.levels {
                let a = acts
                    .get(id)
                    .ok_or_else(|| Error::InvalidInput(format!("unknown activity {id}")))?;
                let c = crops.entry(a.product.clone()).or_default();
                c.area += h.weight * x;
                c.production += h.weight * x * a.yield_per_ha;
                c.fert += h.weight * x * a.fertilizer_qty;
                total_area += h.weight * x;
            }
        }
        for (crop, c) in &crops {
            let g = crop.as_str();
            rows.push(row(g, "area", Some(c.area), "ha"));
            rows.push(row(g, "area_share", ratio(100.0 * c.area, total_area), "%"));
            rows.push(row(g, "production", Some(c.production), "kg"));
            rows.push(row(g, "yield", ratio(c.production, c.area), "kg/ha"));
            rows.push(row(g, "fertilizer_per_ha", ratio(c.fert, c.area), "kg/ha"));
        }
        return Ok(IndicatorTable { group_by, rows });
    }

    let mut groups: BTreeMap<String, GroupAcc> = BTreeMap::new();
    for h in &households {
        let s = &results[&h.id];
        let g = groups.entry(household_group(h, classes, group_by)?).or_default();
        let w = h.weight;
        g.weight += w;
        g.area += w * s.area();
        g.fert += w * s.fertilizer_kg();
        g.farm_income += w * s.farm_income;
        g.total_income += w * s.total_income;
        g.outlay += w * s.subsidy_outlay;
        if s.fertilizer_subsidized_kg > 0.0 {
            g.beneficiaries += w;
        }
        for (id, x) in &s.levels {
            if let Some(a) = acts.get(id) {
                *g.crop_area.entry(a.product.clone()).or_insert(0.0) += w * x;
            }
        }
    }
    for (name, g) in &groups {
        rows.push(row(name, "households", Some(g.weight), "count"));
        rows.push(row(name, "area", Some(g.area), "ha"));
        rows.push(row(name, "mean_area", ratio(g.area, g.weight), "ha"));
        rows.push(row(name, "fertilizer", Some(g.fert), "kg"));
        rows.push(row(name, "fertilizer_per_ha", ratio(g.fert, g.area), "kg/ha"));
        rows.push(row(name, "mean_farm_income", ratio(g.farm_income, g.weight), "FCFA"));
        rows.push(row(name, "mean_total_income", ratio(g.total_income, g.weight), "FCFA"));
        rows.push(row(name, "beneficiary_rate", ratio(100.0 * g.beneficiaries, g.weight), "%"));
        rows.push(row(name, "subsidy_outlay", Some(g.outlay), "FCFA"));
        for (crop, a) in &g.crop_area {
            rows.push(row(name, &format!("area_share_{crop}"), ratio(100.0 * a, g.area), "%"));
        }
    }
    Ok(IndicatorTable { group_by, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub group: String,
    pub indicator: String,
    pub baseline: Option<f64>,
    pub scenario: Option<f64>,
    /// Percent change; `None` when flagged.
    pub change_pct: Option<f64>,
    /// `new` when the baseline is zero and the scenario is not, `empty` when
    /// either cell is undefined.
    pub flag: Option<String>,
}

/// Percent change of every cell against the baseline table.
pub fn compare(scenario: &IndicatorTable, baseline: &IndicatorTable) -> Result<Vec<ComparisonRow>> {
    let key = |r: &IndicatorRow| (r.group.clone(), r.indicator.clone());
    let base: BTreeMap<_, _> = baseline.rows.iter().map(|r| (key(r), r.value)).collect();
    let scen: BTreeMap<_, _> = scenario.rows.iter().map(|r| (key(r), r.value)).collect();
    if scenario.group_by != baseline.group_by {
        return Err(Error::InvalidInput("tables are grouped differently".into()));
    }
    let mut out = Vec::new();
    // Keys present on one side only are compared against zero.
    let mut keys: Vec<_> = base.keys().chain(scen.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        let b = base.get(&k).copied().unwrap_or(Some(0.0));
        let s = scen.get(&k).copied().unwrap_or(Some(0.0));
        let (change, flag) = match (b, s) {
            (Some(b), Some(s)) if b != 0.0 => (Some(100.0 * (s - b) / b), None),
            (Some(_), Some(s)) if s == 0.0 => (Some(0.0), None),
            (Some(_), Some(_)) => (None, Some("new".to_owned())),
            _ => (None, Some("empty".to_owned())),
        };
        out.push(ComparisonRow {
            group: k.0,
            indicator: k.1,
            baseline: b,
            scenario: s,
            change_pct: change,
            flag,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub household: HouseholdId,
    /// Cumulative weighted population share after this household, 0..=1.
    pub cumulative_share: f64,
    pub gap_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IncomeDistribution {
    pub points: Vec<CurvePoint>,
    /// Households left out because their reference income is not positive.
    pub excluded: Vec<HouseholdId>,
}

/// Sorted curve of per-household income gaps against a reference run.
pub fn income_distribution(
    results: &BTreeMap<HouseholdId, Solution>,
    reference: &BTreeMap<HouseholdId, Solution>,
    households: &[Household],
) -> Result<IncomeDistribution> {
    let mut gaps = Vec::new();
    let mut excluded = Vec::new();
    let mut hh: Vec<&Household> = households.iter().collect();
    hh.sort_by(|a, b| a.id.cmp(&b.id));
    for h in hh {
        let (Some(s), Some(r)) = (results.get(&h.id), reference.get(&h.id)) else {
            if results.contains_key(&h.id) != reference.contains_key(&h.id) {
                return Err(Error::InvalidInput(format!(
                    "household {} missing from one of the runs",
                    h.id
                )));
            }
            continue;
        };
        if r.total_income <= 0.0 {
            excluded.push(h.id.clone());
            continue;
        }
        gaps.push((100.0 * (s.total_income - r.total_income) / r.total_income, h));
    }
    gaps.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
    let total: f64 = gaps.iter().map(|(_, h)| h.weight).sum();
    let mut cum = 0.0;
    let points = gaps
        .into_iter()
        .map(|(gap, h)| {
            cum += h.weight;
            CurvePoint {
                household: h.id.clone(),
                cumulative_share: if total > 0.0 { cum / total } else { 0.0 },
                gap_pct: gap,
            }
        })
        .collect();
    Ok(IncomeDistribution { points, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBenefit {
    /// FCFA
    pub cost: f64,
    pub benefit: f64,
    /// Benefit per FCFA of outlay; undefined when nothing is spent.
    pub ratio: Option<f64>,
}

impl CostBenefit {
    pub fn from_totals(cost: f64, benefit: f64) -> Self {
        CostBenefit {
            cost,
            benefit,
            ratio: if cost != 0.0 { Some(benefit / cost) } else { None },
        }
    }
}

/// Weighted subsidy outlay and income gain against the abolition run.
pub fn cost_benefit(
    results: &BTreeMap<HouseholdId, Solution>,
    abolition: &BTreeMap<HouseholdId, Solution>,
    households: &[Household],
) -> Result<CostBenefit> {
    let mut hh: Vec<&Household> = households.iter().collect();
    hh.sort_by(|a, b| a.id.cmp(&b.id));
    let (mut cost, mut benefit) = (0.0, 0.0);
    for h in hh {
        match (results.get(&h.id), abolition.get(&h.id)) {
            (Some(s), Some(a)) => {
                cost += h.weight * s.subsidy_outlay;
                benefit += h.weight * (s.total_income - a.total_income);
            }
            (None, None) => {}
            _ => {
                return Err(Error::InvalidInput(format!(
                    "household {} missing from one of the runs",
                    h.id
                )))
            }
        }
    }
    Ok(CostBenefit::from_totals(cost, benefit))
}

/// Write rows of any serializable type as CSV.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Activity, ActivityId, InputCosts, Practice, Season};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn act(id: &str, product: &str, y: f64, f: f64) -> Activity {
        Activity {
            id: id.into(),
            product: product.into(),
            practice: Practice::Extensive,
            season: Season::Rainy,
            yield_per_ha: y,
            input_costs: InputCosts::default(),
            fertilizer_qty: f,
            labor_req: 0.0,
            subsidy_eligible_fertilizer: true,
            production_subsidy: 0.0,
        }
    }

    fn fixture(weights: &[f64], incomes: &[f64]) -> (ModelInstance, BTreeMap<HouseholdId, Solution>) {
        let activities = vec![act("mil_ext_rainy", "mil", 600.0, 10.0), act("arachide_ext_rainy", "arachide", 700.0, 0.0)];
        let mut households = Vec::new();
        let mut sols = BTreeMap::new();
        for (i, (w, inc)) in weights.iter().zip(incomes).enumerate() {
            let id = HouseholdId::from(format!("h{i}"));
            households.push(Household {
                id: id.clone(),
                region: if i % 2 == 0 { "Kaffrine".into() } else { "Louga".into() },
                weight: *w,
                ..Default::default()
            });
            let levels: BTreeMap<ActivityId, f64> = [
                ("mil_ext_rainy".into(), 1.0 + i as f64),
                ("arachide_ext_rainy".into(), 2.0),
            ]
            .into_iter()
            .collect();
            sols.insert(
                id.clone(),
                Solution {
                    household: id,
                    fertilizer_unsubsidized_kg: 10.0 * (1.0 + i as f64),
                    levels,
                    farm_income: *inc,
                    total_income: *inc,
                    subsidy_outlay: 10.0,
                    ..Default::default()
                },
            );
        }
        (
            ModelInstance {
                manifest: Default::default(),
                products: vec![],
                activities,
                households,
                prices: Default::default(),
            },
            sols,
        )
    }

    #[test]
    fn weighted_mean_income() {
        let (m, s) = fixture(&[1.0, 3.0], &[100.0, 200.0]);
        let t = aggregate(&s, &m, &BTreeMap::new(), GroupBy::National).unwrap();
        assert_eq!(t.get("national", "mean_total_income"), Some(175.0));
    }

    #[test]
    fn single_household_is_its_own_aggregate() {
        let (m, s) = fixture(&[1.0], &[123.0]);
        let t = aggregate(&s, &m, &BTreeMap::new(), GroupBy::National).unwrap();
        assert_eq!(t.get("national", "area"), Some(3.0));
        assert_eq!(t.get("national", "mean_farm_income"), Some(123.0));
        assert_eq!(t.get("national", "fertilizer_per_ha"), Some(10.0 / 3.0));
        let c = aggregate(&s, &m, &BTreeMap::new(), GroupBy::Crop).unwrap();
        assert_eq!(c.get("mil", "yield"), Some(600.0));
        assert_eq!(c.get("mil", "fertilizer_per_ha"), Some(10.0));
    }

    #[test]
    fn zero_area_yield_is_empty() {
        let (m, mut s) = fixture(&[1.0], &[1.0]);
        s.values_mut().next().unwrap().levels.insert("mil_ext_rainy".into(), 0.0);
        let c = aggregate(&s, &m, &BTreeMap::new(), GroupBy::Crop).unwrap();
        assert_eq!(c.get("mil", "yield"), None);
        assert_eq!(c.get("mil", "area"), Some(0.0));
    }

    #[test]
    fn production_rendered_in_tonnes() {
        let (m, s) = fixture(&[1.0], &[1.0]);
        let c = aggregate(&s, &m, &BTreeMap::new(), GroupBy::Crop).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("crop,mil,production,0.6,t"));
    }

    #[test]
    fn comparison_cells() {
        let t = |v: f64| IndicatorTable {
            group_by: GroupBy::National,
            rows: vec![row("national", "x", Some(v), "ha"), row("national", "y", Some(0.0), "ha")],
        };
        let c = compare(&t(202.0), &t(200.0)).unwrap();
        assert_relative_eq!(c[0].change_pct.unwrap(), 1.0, max_relative = 1e-12);
        assert!(compare(&t(5.0), &t(5.0)).unwrap().iter().all(|r| r.change_pct == Some(0.0)));
        let mut s = t(1.0);
        s.rows[1].value = Some(5.0);
        let c = compare(&s, &t(1.0)).unwrap();
        assert_eq!(c[1].flag.as_deref(), Some("new"));
        assert_eq!(c[1].change_pct, None);
    }

    #[test]
    fn cost_benefit_fixtures() {
        let cases = [(3.88e9, 4.08e9, 1.0515), (4.64e9, 5.17e9, 1.1142), (1.99e9, 2.39e9, 1.2010)];
        for (c, b, r) in cases {
            let cb = CostBenefit::from_totals(c, b);
            assert!((cb.ratio.unwrap() - r).abs() < 5e-5);
        }
        assert_eq!(CostBenefit::from_totals(0.0, 0.0).ratio, None);
    }

    #[test]
    fn abolition_against_itself() {
        let (m, s) = fixture(&[1.0, 2.0], &[10.0, 20.0]);
        let mut abol = s.clone();
        abol.values_mut().for_each(|x| x.subsidy_outlay = 0.0);
        let cb = cost_benefit(&abol, &abol, &m.households).unwrap();
        assert_eq!((cb.cost, cb.benefit, cb.ratio), (0.0, 0.0, None));
    }

    #[test]
    fn step_curve() {
        let (m, reference) = fixture(&[1.0, 1.0, 1.0, 1.0], &[100.0; 4]);
        let mut s = reference.clone();
        s.get_mut(&HouseholdId::from("h2")).unwrap().total_income = 110.0;
        let d = income_distribution(&s, &reference, &m.households).unwrap();
        assert_eq!(d.points.len(), 4);
        assert!((d.points[3].gap_pct - 10.0).abs() < 1e-12);
        assert!(d.points[..3].iter().all(|p| p.gap_pct == 0.0));
        assert_eq!(d.points[3].cumulative_share, 1.0);
        let flat = income_distribution(&reference, &reference, &m.households).unwrap();
        assert!(flat.points.iter().all(|p| p.gap_pct == 0.0));
    }

    #[test]
    fn nonpositive_reference_is_excluded() {
        let (m, reference) = fixture(&[1.0, 1.0], &[0.0, 100.0]);
        let d = income_distribution(&reference, &reference, &m.households).unwrap();
        assert_eq!(d.excluded, vec![HouseholdId::from("h0")]);
        assert_eq!(d.points.len(), 1);
    }

    proptest! {
        #[test]
        fn doubling_weights(ws in proptest::collection::vec(0.1f64..10.0, 1..6), inc in proptest::collection::vec(1.0f64..1e6, 6)) {
            let (m, s) = fixture(&ws, &inc[..ws.len()]);
            let mut m2 = m.clone();
            m2.households.iter_mut().for_each(|h| h.weight *= 2.0);
            let a = aggregate(&s, &m, &BTreeMap::new(), GroupBy::National).unwrap();
            let b = aggregate(&s, &m2, &BTreeMap::new(), GroupBy::National).unwrap();
            for ind in ["area", "fertilizer", "subsidy_outlay"] {
                let (x, y) = (a.get("national", ind).unwrap(), b.get("national", ind).unwrap());
                prop_assert!((2.0 * x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
            for ind in ["mean_total_income", "fertilizer_per_ha", "area_share_mil"] {
                let (x, y) = (a.get("national", ind).unwrap(), b.get("national", ind).unwrap());
                prop_assert!((x - y).abs() <= 1e-9 * y.abs().max(1.0));
            }
            let shares: f64 = a.rows.iter().filter(|r| r.indicator.starts_with("area_share_")).map(|r| r.value.unwrap()).sum();
            prop_assert!((shares - 100.0).abs() < 1e-6);
        }

        #[test]
        fn benefit_decomposes_over_regions(ws in proptest::collection::vec(0.1f64..10.0, 2..6), inc in proptest::collection::vec(1.0f64..1e6, 6)) {
            let (m, s) = fixture(&ws, &inc[..ws.len()]);
            let mut abol = s.clone();
            abol.values_mut().for_each(|x| x.total_income *= 0.9);
            let all = cost_benefit(&s, &abol, &m.households).unwrap();
            let mut parts = 0.0;
            for region in ["Kaffrine", "Louga"] {
                let hh: Vec<Household> = m.households.iter().filter(|h| h.region.as_str() == region).cloned().collect();
                parts += cost_benefit(&s, &abol, &hh).unwrap().benefit;
            }
            prop_assert!((parts - all.benefit).abs() <= 1e-9 * all.benefit.abs().max(1.0));
        }

        #[test]
        fn curve_ignores_input_order(seed in 0u64..1000) {
            let (mut m, reference) = fixture(&[1.0, 2.0, 3.0, 4.0], &[100.0, 200.0, 300.0, 400.0]);
            let mut s = reference.clone();
            for (k, v) in s.values_mut().enumerate() {
                v.total_income *= 1.0 + ((seed as f64 + k as f64) % 7.0) / 100.0;
            }
            let a = income_distribution(&s, &reference, &m.households).unwrap();
            m.households.reverse();
            let b = income_distribution(&s, &reference, &m.households).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
