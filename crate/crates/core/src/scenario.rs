//! Baseline projection and policy counterfactuals.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::HouseholdCalibration;
use crate::error::{Error, Result};
use crate::household::{self, ModelOptions};
use crate::types::{
    Activity, Diagnostic, Eligibility, Household, HouseholdId, ModelInstance, OrderedHa,
    ProductId, Solution, SubsidyPolicy,
};

/// Base year to baseline projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineSpec {
    pub years: u32,
    /// Annual rate applied to every cost, the fertilizer price, cash and
    /// off-farm income.
    pub inflation: f64,
    /// Fractional change per product.
    pub yield_shift: BTreeMap<ProductId, f64>,
    pub price_shift: BTreeMap<ProductId, f64>,
}

impl Default for BaselineSpec {
    fn default() -> Self {
        let table = [
            ("arachide", 0.341, 0.135),
            ("mais", 0.332, 0.098),
            ("mil", 0.135, 0.240),
            ("oignon", 0.047, 0.304),
            ("riz", 0.133, 0.294),
        ];
        BaselineSpec {
            years: 6,
            inflation: 0.027,
            yield_shift: table.iter().map(|(p, y, _)| (ProductId::from(*p), *y)).collect(),
            price_shift: table.iter().map(|(p, _, v)| (ProductId::from(*p), *v)).collect(),
        }
    }
}

impl BaselineSpec {
    /// No change at all.
    pub fn identity() -> Self {
        BaselineSpec {
            years: 0,
            inflation: 0.0,
            yield_shift: BTreeMap::new(),
            price_shift: BTreeMap::new(),
        }
    }

    pub fn cost_factor(&self) -> f64 {
        (1.0 + self.inflation).powi(self.years as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self
            .yield_shift
            .iter()
            .chain(&self.price_shift)
            .find(|(_, v)| !(**v > -1.0));
        if let Some((p, v)) = bad {
            return Err(Error::InvalidInput(format!("shift {v} for {p} must exceed -1")));
        }
        if !(self.inflation > -1.0) {
            return Err(Error::InvalidInput("inflation must exceed -1".into()));
        }
        Ok(())
    }
}

/// Per-ha margin at market prices, used to carry behavioral terms across
/// the projection.
fn market_margin(activity: &Activity, model: &ModelInstance) -> f64 {
    let p = model
        .prices
        .product(&activity.product)
        .map(|p| p.market)
        .unwrap_or(0.0);
    activity.yield_per_ha * p + activity.production_subsidy
        - activity.input_costs.non_fertilizer()
        - activity.fertilizer_qty * model.prices.fertilizer_market_price
}

/// Project the base-year model and its calibration to the baseline.
///
/// Behavioral terms of each activity are multiplied by the ratio of its
/// projected to its base-year margin, or left alone when either margin is
/// not positive.
pub fn project_baseline(
    model: &ModelInstance,
    calibrations: &BTreeMap<HouseholdId, HouseholdCalibration>,
    spec: &BaselineSpec,
) -> Result<(ModelInstance, BTreeMap<HouseholdId, HouseholdCalibration>)> {
    spec.validate()?;
    let factor = spec.cost_factor();
    let mut out = model.clone();
    out.prices.fertilizer_market_price *= factor;
    for (id, price) in out.prices.products.iter_mut() {
        price.market *= 1.0 + spec.price_shift.get(id).copied().unwrap_or(0.0);
    }
    for v in out.prices.factor_prices.values_mut() {
        *v *= factor;
    }
    for a in out.activities.iter_mut() {
        a.yield_per_ha *= 1.0 + spec.yield_shift.get(&a.product).copied().unwrap_or(0.0);
        a.input_costs = a.input_costs.scaled(factor);
        a.production_subsidy *= factor;
    }
    for h in out.households.iter_mut() {
        h.cash_endowment *= factor;
        h.exog_income *= factor;
    }

    let kappa: BTreeMap<_, f64> = model
        .activities
        .iter()
        .zip(&out.activities)
        .map(|(before, after)| {
            let (g0, g1) = (market_margin(before, model), market_margin(after, &out));
            let k = if g0 > 0.0 && g1 > 0.0 { g1 / g0 } else { 1.0 };
            (before.id.clone(), k)
        })
        .collect();
    let mut cals = calibrations.clone();
    for cal in cals.values_mut() {
        for (id, d) in cal.behavioral.linear.iter_mut() {
            *d *= kappa.get(id).copied().unwrap_or(1.0);
        }
        for ((a, b), q) in cal.behavioral.quadratic.iter_mut() {
            let ka = kappa.get(a).copied().unwrap_or(1.0);
            let kb = kappa.get(b).copied().unwrap_or(1.0);
            *q *= (ka * kb).sqrt();
        }
        for (id, s) in cal.margin_shift.iter_mut() {
            *s *= kappa.get(id).copied().unwrap_or(1.0);
        }
    }
    Ok((out, cals))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "baseline")]
    Baseline,
    Abol,
    Univ,
    Cibl,
    #[serde(rename = "custom")]
    Custom,
}

impl ScenarioKind {
    pub fn parse(name: &str) -> ScenarioKind {
        match name.to_ascii_lowercase().as_str() {
            "baseline" => ScenarioKind::Baseline,
            "abol" => ScenarioKind::Abol,
            "univ" => ScenarioKind::Univ,
            "cibl" => ScenarioKind::Cibl,
            _ => ScenarioKind::Custom,
        }
    }
}

pub const BASE_RATE: f64 = 0.5;
pub const BASE_QUOTA_KG: f64 = 150.0;
pub const CAPPED_QUOTA_KG: f64 = 75.0;
pub const TARGET_AREA_HA: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub name: String,
    pub kind: ScenarioKind,
    pub policy: SubsidyPolicy,
}

impl ScenarioSpec {
    /// The policy in force: observed beneficiaries, half price, three bags.
    pub fn baseline(model: &ModelInstance) -> Self {
        ScenarioSpec {
            name: "baseline".into(),
            kind: ScenarioKind::Baseline,
            policy: model.base_policy(BASE_RATE, BASE_QUOTA_KG),
        }
    }

    pub fn abol() -> Self {
        ScenarioSpec {
            name: "Abol".into(),
            kind: ScenarioKind::Abol,
            policy: SubsidyPolicy::none("Abol"),
        }
    }

    pub fn univ() -> Self {
        ScenarioSpec {
            name: "Univ".into(),
            kind: ScenarioKind::Univ,
            policy: SubsidyPolicy {
                name: "Univ".into(),
                rate: BASE_RATE,
                quota_kg: CAPPED_QUOTA_KG,
                eligibility: Eligibility::All,
            },
        }
    }

    pub fn cibl() -> Self {
        ScenarioSpec {
            name: "Cibl".into(),
            kind: ScenarioKind::Cibl,
            policy: SubsidyPolicy {
                name: "Cibl".into(),
                rate: BASE_RATE,
                quota_kg: CAPPED_QUOTA_KG,
                eligibility: Eligibility::area_leq(TARGET_AREA_HA),
            },
        }
    }

    /// Baseline, Abol, Univ and Cibl.
    pub fn presets(model: &ModelInstance) -> Vec<ScenarioSpec> {
        vec![Self::baseline(model), Self::abol(), Self::univ(), Self::cibl()]
    }

    pub fn preset(name: &str, model: &ModelInstance) -> Option<ScenarioSpec> {
        match ScenarioKind::parse(name) {
            ScenarioKind::Baseline => Some(Self::baseline(model)),
            ScenarioKind::Abol => Some(Self::abol()),
            ScenarioKind::Univ => Some(Self::univ()),
            ScenarioKind::Cibl => Some(Self::cibl()),
            ScenarioKind::Custom => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.policy;
        if !p.is_valid() {
            return Err(Error::InvalidInput(format!("scenario {}: invalid policy", self.name)));
        }
        let ok = match self.kind {
            ScenarioKind::Abol => p.rate == 0.0 || p.eligibility == Eligibility::None,
            ScenarioKind::Univ => p.eligibility == Eligibility::All && p.quota_kg == CAPPED_QUOTA_KG,
            ScenarioKind::Cibl => {
                p.eligibility == Eligibility::area_leq(TARGET_AREA_HA) && p.quota_kg == CAPPED_QUOTA_KG
            }
            ScenarioKind::Baseline | ScenarioKind::Custom => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "scenario {} does not match its {:?} definition",
                self.name, self.kind
            )))
        }
    }
}

/// Eligibility as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EligibilityConfig {
    All,
    None,
    AreaLeq { threshold_ha: f64 },
    /// Households that received subsidized fertilizer in the base year.
    BaseBeneficiaries,
}

/// One scenario as written in a TOML or JSON file. A `preset` fills in the
/// policy; explicit fields override it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub rate: Option<f64>,
    #[serde(default)]
    pub quota_kg: Option<f64>,
    #[serde(default)]
    pub eligibility: Option<EligibilityConfig>,
}

impl ScenarioConfig {
    pub fn resolve(&self, model: &ModelInstance) -> Result<ScenarioSpec> {
        let base = match &self.preset {
            Some(p) => ScenarioSpec::preset(p, model)
                .ok_or_else(|| Error::InvalidInput(format!("unknown preset `{p}`")))?,
            None => ScenarioSpec {
                name: self.name.clone(),
                kind: ScenarioKind::Custom,
                policy: SubsidyPolicy::none(&self.name),
            },
        };
        let overridden = self.rate.is_some() || self.quota_kg.is_some() || self.eligibility.is_some();
        let mut policy = base.policy;
        policy.name = self.name.clone();
        if let Some(r) = self.rate {
            policy.rate = r;
        }
        if let Some(q) = self.quota_kg {
            policy.quota_kg = q;
        }
        if let Some(e) = &self.eligibility {
            policy.eligibility = match e {
                EligibilityConfig::All => Eligibility::All,
                EligibilityConfig::None => Eligibility::None,
                EligibilityConfig::AreaLeq { threshold_ha } => Eligibility::AreaLeq {
                    threshold_ha: OrderedHa::new(*threshold_ha),
                },
                EligibilityConfig::BaseBeneficiaries => model.base_policy(0.0, 0.0).eligibility,
            };
        }
        let spec = ScenarioSpec {
            name: self.name.clone(),
            kind: if overridden { ScenarioKind::Custom } else { base.kind },
            policy,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Weighted share of households that can buy subsidized fertilizer.
pub fn eligibility_rate(households: &[Household], policy: &SubsidyPolicy) -> Result<f64> {
    let total: f64 = households.iter().map(|h| h.weight).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("zero total household weight".into()));
    }
    let eligible: f64 = households
        .iter()
        .filter(|h| policy.subsidizes(h))
        .map(|h| h.weight)
        .sum();
    Ok(eligible / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScenarioTotals {
    pub households: usize,
    pub weight: f64,
    /// Weighted sums.
    pub area_ha: f64,
    pub fertilizer_kg: f64,
    pub total_income: f64,
    pub subsidy_outlay: f64,
    pub eligibility_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub name: String,
    pub policy: SubsidyPolicy,
    pub solutions: BTreeMap<HouseholdId, Solution>,
    pub totals: ScenarioTotals,
    pub diagnostics: Vec<Diagnostic>,
}

/// Solve every calibrated household under the scenario's policy.
pub fn run_scenario(
    model: &ModelInstance,
    calibrations: &BTreeMap<HouseholdId, HouseholdCalibration>,
    spec: &ScenarioSpec,
    options: &ModelOptions,
) -> Result<ScenarioResult> {
    spec.validate()?;
    let (solutions, diagnostics) =
        household::solve_all(&model.households, calibrations, model, &spec.policy, options);
    let mut totals = ScenarioTotals {
        households: solutions.len(),
        ..Default::default()
    };
    for h in &model.households {
        if let Some(s) = solutions.get(&h.id) {
            let w = h.weight;
            totals.weight += w;
            totals.area_ha += w * s.area();
            totals.fertilizer_kg += w * s.fertilizer_kg();
            totals.total_income += w * s.total_income;
            totals.subsidy_outlay += w * s.subsidy_outlay;
        }
    }
    totals.eligibility_rate = eligibility_rate(&model.households, &spec.policy).unwrap_or(0.0);
    Ok(ScenarioResult {
        name: spec.name.clone(),
        policy: spec.policy.clone(),
        solutions,
        totals,
        diagnostics,
    })
}
