//! End-to-end orchestration: survey, model, typology, calibration, baseline,
//! scenarios and reports, all in memory.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::calibration::{self, CalibrationOptions, ElasticityTargets, PopulationCalibration};
use crate::error::{Error, Result};
use crate::household::ModelOptions;
use crate::ingest::{self, BuildOptions, CleaningPolicy, CleaningRecord, SurveyDataset};
use crate::report::{self, ComparisonRow, CostBenefit, GroupBy, IncomeDistribution, IndicatorTable};
use crate::scenario::{self, BaselineSpec, ScenarioConfig, ScenarioKind, ScenarioResult, ScenarioSpec};
use crate::synth::SynthOptions;
use crate::typology::{self, FarmClass, PracticeLabels};
use crate::types::{Diagnostic, HouseholdId, ModelInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub elasticities: ElasticityTargets,
    pub non_myopic: bool,
    pub max_iterations: usize,
    pub tolerance: f64,
    pub perturbation: f64,
    pub consumption_enabled: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        let o = CalibrationOptions::default();
        CalibrationConfig {
            elasticities: o.targets,
            non_myopic: o.non_myopic,
            max_iterations: o.max_iterations,
            tolerance: o.tolerance,
            perturbation: o.perturbation,
            consumption_enabled: o.model.consumption_enabled,
        }
    }
}

impl CalibrationConfig {
    pub fn model_options(&self) -> ModelOptions {
        ModelOptions {
            consumption_enabled: self.consumption_enabled,
            ..ModelOptions::default()
        }
    }

    pub fn options(&self) -> CalibrationOptions {
        CalibrationOptions {
            targets: self.elasticities.clone(),
            non_myopic: self.non_myopic,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            perturbation: self.perturbation,
            model: self.model_options(),
        }
    }
}

/// Everything a run can be configured with. Every section is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthOptions,
    pub cleaning: CleaningPolicy,
    pub build: BuildOptions,
    /// Practice clusters per crop.
    pub practice_clusters: usize,
    pub calibration: CalibrationConfig,
    pub baseline: BaselineSpec,
    /// Scenarios run after the baseline; empty means Abol, Univ and Cibl.
    pub scenarios: Vec<ScenarioConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synth: SynthOptions::default(),
            cleaning: CleaningPolicy::default(),
            build: BuildOptions::default(),
            practice_clusters: 2,
            calibration: CalibrationConfig::default(),
            baseline: BaselineSpec::default(),
            scenarios: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.cleaning.validate()?;
        self.baseline.validate()?;
        if self.practice_clusters == 0 {
            return Err(Error::InvalidInput("practice_clusters must be at least 1".into()));
        }
        Ok(())
    }

    /// The baseline run followed by the configured or preset scenarios.
    pub fn scenario_specs(&self, model: &ModelInstance) -> Result<Vec<ScenarioSpec>> {
        let mut specs = vec![ScenarioSpec::baseline(model)];
        if self.scenarios.is_empty() {
            specs.extend([ScenarioSpec::abol(), ScenarioSpec::univ(), ScenarioSpec::cibl()]);
        } else {
            for c in &self.scenarios {
                let spec = c.resolve(model)?;
                if spec.kind == ScenarioKind::Baseline {
                    continue;
                }
                specs.push(spec);
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &specs {
            if !seen.insert(s.name.clone()) {
                return Err(Error::DuplicateId(s.name.clone()));
            }
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutput {
    pub model: ModelInstance,
    pub cleaning: Vec<CleaningRecord>,
    pub practices: PracticeLabels,
    pub diagnostics: Vec<Diagnostic>,
}

/// Clean the survey, label practices and assemble the model.
pub fn ingest(data: &SurveyDataset, config: &PipelineConfig) -> Result<IngestOutput> {
    config.validate()?;
    let (plots, report, mut diagnostics) = ingest::clean_plots(data, &config.cleaning)?;
    let practices =
        typology::classify_practices(&ingest::practice_observations(&plots), config.practice_clusters);
    diagnostics.extend(practices.diagnostics.iter().cloned());
    let built = ingest::build_from_clean(
        data,
        &plots,
        report,
        &mut diagnostics,
        &practices.labels,
        &config.build,
    )?;
    let mut diagnostics = built.diagnostics;
    diagnostics.sort();
    diagnostics.dedup();
    Ok(IngestOutput {
        model: built.model,
        cleaning: built.report,
        practices,
        diagnostics,
    })
}

/// Size class and specialization of every household.
pub fn classify(model: &ModelInstance) -> BTreeMap<HouseholdId, FarmClass> {
    model
        .households
        .iter()
        .map(|h| (h.id.clone(), typology::classify_farm(h, model)))
        .collect()
}

/// Calibration groups pair region and specialization.
pub fn calibration_groups(
    model: &ModelInstance,
    classes: &BTreeMap<HouseholdId, FarmClass>,
) -> BTreeMap<HouseholdId, String> {
    model
        .households
        .iter()
        .map(|h| {
            let spec = classes
                .get(&h.id)
                .map(|c| c.specialization.as_str())
                .unwrap_or("mixte");
            (h.id.clone(), format!("{}/{}", h.region, spec))
        })
        .collect()
}

/// Calibrate every household against the base-year policy.
pub fn calibrate(
    model: &ModelInstance,
    classes: &BTreeMap<HouseholdId, FarmClass>,
    config: &PipelineConfig,
) -> PopulationCalibration {
    let policy = model.base_policy(config.build.base_rate, config.build.base_quota_kg);
    calibration::calibrate_population(
        model,
        &policy,
        &calibration_groups(model, classes),
        &config.calibration.options(),
    )
}

/// Run the baseline and every scenario on the projected model.
pub fn simulate(
    model: &ModelInstance,
    calibrations: &BTreeMap<HouseholdId, calibration::HouseholdCalibration>,
    config: &PipelineConfig,
) -> Result<Vec<ScenarioResult>> {
    let options = config.calibration.model_options();
    config
        .scenario_specs(model)?
        .iter()
        .map(|s| scenario::run_scenario(model, calibrations, s, &options))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub name: String,
    pub table: IndicatorTable,
    /// Against the baseline run; absent for the baseline itself.
    pub comparison: Option<Vec<ComparisonRow>>,
    /// Against the abolition run, when one exists.
    pub distribution: Option<IncomeDistribution>,
    pub cost_benefit: Option<CostBenefit>,
}

/// Indicator tables, comparisons, income curves and cost-benefit figures.
///
/// The first result is the reference for comparisons; the result named
/// `Abol` (or any result of that kind) is the zero point for benefits.
pub fn reports(
    model: &ModelInstance,
    classes: &BTreeMap<HouseholdId, FarmClass>,
    results: &[ScenarioResult],
    group_by: GroupBy,
) -> Result<Vec<ScenarioReport>> {
    let Some(reference) = results.first() else {
        return Err(Error::Empty("no scenario results".into()));
    };
    let reference_table = report::aggregate(&reference.solutions, model, classes, group_by)?;
    let abolition = results
        .iter()
        .find(|r| r.policy.rate == 0.0 || r.policy.quota_kg == 0.0 || r.name.eq_ignore_ascii_case("abol"));
    let mut out = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let table = report::aggregate(&r.solutions, model, classes, group_by)?;
        let comparison = if i == 0 {
            None
        } else {
            Some(report::compare(&table, &reference_table)?)
        };
        let (distribution, cost_benefit) = match abolition {
            Some(a) => (
                Some(report::income_distribution(&r.solutions, &a.solutions, &model.households)?),
                Some(report::cost_benefit(&r.solutions, &a.solutions, &model.households)?),
            ),
            None => (None, None),
        };
        out.push(ScenarioReport {
            name: r.name.clone(),
            table,
            comparison,
            distribution,
            cost_benefit,
        });
    }
    Ok(out)
}

/// Every stage of a run, kept for inspection.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub ingest: IngestOutput,
    pub classes: BTreeMap<HouseholdId, FarmClass>,
    pub calibration: PopulationCalibration,
    pub baseline_model: ModelInstance,
    pub baseline_calibration: BTreeMap<HouseholdId, calibration::HouseholdCalibration>,
    pub results: Vec<ScenarioResult>,
}

/// Run ingest through simulation on an in-memory survey.
pub fn run(data: &SurveyDataset, config: &PipelineConfig) -> Result<PipelineOutput> {
    let ingest = ingest(data, config)?;
    let classes = classify(&ingest.model);
    let calibration = calibrate(&ingest.model, &classes, config);
    if calibration.households.is_empty() {
        return Err(Error::Empty("no household could be calibrated".into()));
    }
    let (baseline_model, baseline_calibration) =
        scenario::project_baseline(&ingest.model, &calibration.households, &config.baseline)?;
    let results = simulate(&baseline_model, &baseline_calibration, config)?;
    Ok(PipelineOutput {
        ingest,
        classes,
        calibration,
        baseline_model,
        baseline_calibration,
        results,
    })
}
