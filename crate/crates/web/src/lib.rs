//! Browser bindings: scenario runs on a small synthetic population, a subsidy
//! rate sweep and the farm typology.
//!
//! Every operation takes and returns JSON strings. The `*_json` functions are
//! the plain Rust entry points; the exported wrappers turn errors into
//! JavaScript exceptions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use hhsim_core::pipeline::{self, PipelineConfig};
use hhsim_core::report::{CostBenefit, GroupBy};
use hhsim_core::scenario::{self, ScenarioKind, ScenarioSpec};
use hhsim_core::synth;
use hhsim_core::types::{Eligibility, ProductCategory, SubsidyPolicy};
use hhsim_core::typology::{specialization_from_values, SizeClass};

/// Upper bound on the synthetic population; calibration runs on one thread.
pub const MAX_HOUSEHOLDS: usize = 300;

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct DemoRequest {
    pub households: usize,
    pub seed: u64,
    pub group_by: String,
}

impl Default for DemoRequest {
    fn default() -> Self {
        DemoRequest {
            households: 60,
            seed: 1,
            group_by: "national".into(),
        }
    }
}

impl DemoRequest {
    fn config(&self) -> Result<PipelineConfig, String> {
        if self.households == 0 || self.households > MAX_HOUSEHOLDS {
            return Err(format!("households must be between 1 and {MAX_HOUSEHOLDS}"));
        }
        let mut config = PipelineConfig::default();
        config.synth.households = self.households;
        config.synth.seed = self.seed;
        Ok(config)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChangeCell {
    pub group: String,
    pub indicator: String,
    pub baseline: Option<f64>,
    pub scenario: Option<f64>,
    pub change_pct: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSummary {
    pub name: String,
    pub cost_benefit: Option<CostBenefit>,
    pub changes: Vec<ChangeCell>,
}

const SHOWN: [&str; 4] = ["fertilizer_per_ha", "mean_total_income", "beneficiary_rate", "subsidy_outlay"];

/// Run the baseline and the three preset scenarios and report the main
/// indicators against the baseline.
pub fn run_scenarios_json(request: &str) -> Result<String, String> {
    let req: DemoRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    let group_by = GroupBy::parse(&req.group_by).ok_or_else(|| format!("unknown grouping {}", req.group_by))?;
    if group_by == GroupBy::Crop {
        return Err("crop grouping has no household indicators".into());
    }
    let config = req.config()?;
    let data = synth::generate(&config.synth).map_err(|e| e.to_string())?;
    let out = pipeline::run(&data, &config).map_err(|e| e.to_string())?;
    let reports = pipeline::reports(&out.baseline_model, &out.classes, &out.results, group_by)
        .map_err(|e| e.to_string())?;
    let summaries: Vec<ScenarioSummary> = reports
        .into_iter()
        .skip(1)
        .map(|r| ScenarioSummary {
            name: r.name,
            cost_benefit: r.cost_benefit,
            changes: r
                .comparison
                .unwrap_or_default()
                .into_iter()
                .filter(|c| SHOWN.contains(&c.indicator.as_str()))
                .map(|c| ChangeCell {
                    group: c.group,
                    indicator: c.indicator,
                    baseline: c.baseline,
                    scenario: c.scenario,
                    change_pct: c.change_pct,
                })
                .collect(),
        })
        .collect();
    serde_json::to_string(&summaries).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct SweepRequest {
    #[serde(flatten)]
    pub population: DemoRequest,
    pub quota_kg: f64,
    pub rates: Vec<f64>,
}

impl Default for SweepRequest {
    fn default() -> Self {
        SweepRequest {
            population: DemoRequest::default(),
            quota_kg: 150.0,
            rates: vec![0.0, 0.25, 0.5, 0.75],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub fertilizer_per_ha: f64,
    pub mean_total_income: f64,
    pub subsidy_outlay: f64,
    /// Income gain over the zero-rate run per FCFA of outlay.
    pub ratio: Option<f64>,
}

/// Calibrate once, then solve a universal subsidy at each rate.
pub fn rate_sweep_json(request: &str) -> Result<String, String> {
    let req: SweepRequest = serde_json::from_str(request).map_err(|e| e.to_string())?;
    if req.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err("rates must lie in [0, 1]".into());
    }
    if !(req.quota_kg >= 0.0) {
        return Err("quota_kg must be non-negative".into());
    }
    let config = req.population.config()?;
    let data = synth::generate(&config.synth).map_err(|e| e.to_string())?;
    let ingest = pipeline::ingest(&data, &config).map_err(|e| e.to_string())?;
    let classes = pipeline::classify(&ingest.model);
    let calibration = pipeline::calibrate(&ingest.model, &classes, &config);
    if calibration.households.is_empty() {
        return Err("no household could be calibrated".into());
    }
    let (model, cals) = scenario::project_baseline(&ingest.model, &calibration.households, &config.baseline)
        .map_err(|e| e.to_string())?;
    let options = config.calibration.model_options();
    let run = |rate: f64| {
        let spec = ScenarioSpec {
            name: format!("rate {rate}"),
            kind: ScenarioKind::Custom,
            policy: SubsidyPolicy {
                name: format!("rate {rate}"),
                rate,
                quota_kg: req.quota_kg,
                eligibility: Eligibility::All,
            },
        };
        scenario::run_scenario(&model, &cals, &spec, &options).map_err(|e| e.to_string())
    };
    let zero = run(0.0)?;
    let mut points = Vec::new();
    for &rate in &req.rates {
        let r = run(rate)?;
        let t = &r.totals;
        let cb = hhsim_core::report::cost_benefit(&r.solutions, &zero.solutions, &model.households)
            .map_err(|e| e.to_string())?;
        points.push(SweepPoint {
            rate,
            fertilizer_per_ha: if t.area_ha > 0.0 { t.fertilizer_kg / t.area_ha } else { 0.0 },
            mean_total_income: if t.weight > 0.0 { t.total_income / t.weight } else { 0.0 },
            subsidy_outlay: t.subsidy_outlay,
            ratio: cb.ratio,
        });
    }
    serde_json::to_string(&points).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Serialize)]
pub struct Classification {
    pub economic_value: f64,
    pub size: SizeClass,
    pub specialization: String,
}

/// Size class and specialization from production value per category, FCFA.
pub fn classify_json(values: &str) -> Result<String, String> {
    let values: BTreeMap<ProductCategory, f64> = serde_json::from_str(values).map_err(|e| e.to_string())?;
    if values.values().any(|v| !v.is_finite() || *v < 0.0) {
        return Err("values must be finite and non-negative".into());
    }
    let total: f64 = values.values().sum();
    let specialization = specialization_from_values(&values).map_err(|e| e.to_string())?;
    let out = Classification {
        economic_value: total,
        size: SizeClass::from_value(total),
        specialization: specialization.as_str().to_owned(),
    };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn run_scenarios(request: &str) -> Result<String, JsError> {
    run_scenarios_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rate_sweep(request: &str) -> Result<String, JsError> {
    rate_sweep_json(request).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn classify(values: &str) -> Result<String, JsError> {
    classify_json(values).map_err(|e| JsError::new(&e))
}
