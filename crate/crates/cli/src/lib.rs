//! `hhsim` command implementations.
//!
//! Every stage reads the artifacts of the previous one from the run
//! directory (`--out`) and writes its own subdirectory with a
//! `run_manifest.json`:
//!
//! ```text
//! survey/       synth
//! model/        ingest
//! typology/     typology
//! calibration/  calibrate
//! baseline/     baseline (model/ and calibration/ inside)
//! scenarios/    simulate (one directory per scenario)
//! reports/      report (one directory per grouping)
//! ```

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hhsim_core::ingest::{self, SurveyDataset};
use hhsim_core::io;
use hhsim_core::pipeline::{self, PipelineConfig};
use hhsim_core::report::{self, GroupBy};
use hhsim_core::scenario::{self, ScenarioResult, ScenarioTotals};
use hhsim_core::synth;
use hhsim_core::typology::{FarmClass, SizeClass, Specialization};
use hhsim_core::types::{Diagnostic, HouseholdId, ModelInstance, Solution, SubsidyPolicy};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_DIAGNOSTICS: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "hhsim", version, about = "Farm-household fertilizer subsidy microsimulation")]
pub struct Cli {
    /// Pipeline configuration, TOML or JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for household solves; defaults to all cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for synthetic data; overrides the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "hhsim-run")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic survey shaped on regional statistics.
    Synth {
        #[arg(long)]
        households: Option<usize>,
        /// Region name, or `Senegal` for the national mix.
        #[arg(long)]
        profile: Option<String>,
    },
    /// Clean a survey and build the model.
    Ingest {
        /// Survey directory; defaults to the run's `survey/`.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Classify farms by economic size and specialization.
    Typology,
    /// Calibrate every household to its observed plan.
    Calibrate,
    /// Project the calibrated model to the baseline year.
    Baseline,
    /// Run the baseline and the configured scenarios.
    Simulate,
    /// Aggregate scenario results into indicator tables.
    Report {
        #[arg(long, default_value = "national")]
        group_by: String,
        /// Also write long-format CSVs for plotting.
        #[arg(long)]
        plot_data: bool,
    },
    /// Every stage from ingest to report.
    Run {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "national")]
        group_by: String,
    },
}

/// A stage failure that should map to exit code 2.
#[derive(Debug)]
pub struct DiagnosticsRaised(pub usize);

impl std::fmt::Display for DiagnosticsRaised {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} validation diagnostics, see diagnostics.csv", self.0)
    }
}

impl std::error::Error for DiagnosticsRaised {}

/// Parse arguments, run, print errors and return the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<DiagnosticsRaised>().is_some() {
                EXIT_DIAGNOSTICS
            } else {
                EXIT_ERROR
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.synth.seed = seed;
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            bail!("--jobs must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker pool")?;
    let ctx = RunContext {
        config,
        config_path: cli.config.clone(),
        out: cli.out.clone(),
    };
    pool.install(|| match &cli.command {
        Command::Synth { households, profile } => cmd_synth(&ctx, *households, profile.as_deref()),
        Command::Ingest { input } => cmd_ingest(&ctx, input.as_deref()),
        Command::Typology => cmd_typology(&ctx),
        Command::Calibrate => cmd_calibrate(&ctx),
        Command::Baseline => cmd_baseline(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Report { group_by, plot_data } => cmd_report(&ctx, group_by, *plot_data),
        Command::Run { input, group_by } => {
            // Diagnostics from ingest do not stop the run; they still set the exit code.
            let ingest = cmd_ingest(&ctx, input.as_deref());
            if let Err(e) = &ingest {
                if e.downcast_ref::<DiagnosticsRaised>().is_none() {
                    return ingest;
                }
            }
            cmd_typology(&ctx)?;
            let cal = cmd_calibrate(&ctx);
            if let Err(e) = &cal {
                if e.downcast_ref::<DiagnosticsRaised>().is_none() {
                    return cal;
                }
            }
            cmd_baseline(&ctx)?;
            cmd_simulate(&ctx)?;
            cmd_report(&ctx, group_by, false)?;
            ingest.and(cal)
        }
    })
}

/// Read a pipeline configuration; the format follows the file extension.
pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let config: PipelineConfig = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    config.validate()?;
    Ok(config)
}

struct RunContext {
    config: PipelineConfig,
    config_path: Option<PathBuf>,
    out: PathBuf,
}

impl RunContext {
    fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    /// Directory of an upstream stage, or an error naming the command to run.
    fn upstream(&self, stage: &str, command: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        if !dir.join(MANIFEST).exists() {
            bail!("missing {} artifacts in {}: run {command} first", stage, self.out.display());
        }
        Ok(dir)
    }

    fn fresh_dir(&self, stage: &str) -> Result<PathBuf> {
        let dir = self.dir(stage);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }
}

pub const MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    /// Seconds since the Unix epoch; taken from `SOURCE_DATE_EPOCH` when set.
    pub timestamp: u64,
}

/// Provenance written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: PathBuf,
    pub seed: u64,
    /// Stages that produced this directory and its inputs, oldest first.
    pub stages: Vec<StageRecord>,
    pub versions: BTreeMap<String, String>,
}

fn timestamp() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(ctx: &RunContext, stage: &str, dir: &Path, input: Option<&Path>, upstream: Option<&Path>) -> Result<()> {
    let mut stages = match upstream {
        Some(up) => io::read_json::<RunManifest>(&up.join(MANIFEST))?.stages,
        None => Vec::new(),
    };
    stages.push(StageRecord {
        stage: stage.to_owned(),
        timestamp: timestamp(),
    });
    let versions = BTreeMap::from([
        ("hhsim".to_owned(), env!("CARGO_PKG_VERSION").to_owned()),
        ("schema".to_owned(), io::SCHEMA_VERSION.to_string()),
    ]);
    // Paths inside the run directory are stored relative to it so that runs
    // in different places produce identical manifests.
    let rel = |p: &Path| p.strip_prefix(&ctx.out).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
    let manifest = RunManifest {
        config: ctx.config_path.clone(),
        input: input.map(rel),
        output: rel(dir),
        seed: ctx.config.synth.seed,
        stages,
        versions,
    };
    io::write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(())
}

fn write_diagnostics(dir: &Path, diagnostics: &[Diagnostic]) -> Result<()> {
    let path = dir.join("diagnostics.csv");
    if diagnostics.is_empty() {
        fs::write(&path, "subject,message\n")?;
    } else {
        io::write_csv(&path, diagnostics)?;
    }
    Ok(())
}

fn cmd_synth(ctx: &RunContext, households: Option<usize>, profile: Option<&str>) -> Result<()> {
    let mut options = ctx.config.synth.clone();
    if let Some(n) = households {
        options.households = n;
    }
    if let Some(p) = profile {
        options.profile = p.to_owned();
    }
    let data = synth::generate(&options)?;
    let dir = ctx.fresh_dir("survey")?;
    ingest::write_survey(&dir, &data)?;
    let stats: Vec<StatsRow> = synth::survey_stats(&data)
        .into_iter()
        .map(|(region, s)| StatsRow { region, stats: s })
        .collect();
    io::write_json(&dir.join("summary.json"), &stats)?;
    write_manifest(ctx, "synth", &dir, None, None)?;
    eprintln!("wrote {} households to {}", data.households.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct StatsRow {
    region: String,
    #[serde(flatten)]
    stats: synth::SurveyStats,
}

#[derive(Serialize, Deserialize)]
struct PracticeRow {
    plot: String,
    practice: hhsim_core::types::Practice,
}

fn cmd_ingest(ctx: &RunContext, input: Option<&Path>) -> Result<()> {
    let survey_dir = match input {
        Some(p) => p.to_path_buf(),
        None => ctx.upstream("survey", "synth (or pass --input)")?,
    };
    let data: SurveyDataset = ingest::load_survey(&survey_dir)?;
    let out = pipeline::ingest(&data, &ctx.config)?;
    let dir = ctx.fresh_dir("model")?;
    io::write_model(&dir, &out.model)?;
    io::write_csv(&dir.join("cleaning_report.csv"), &out.cleaning)?;
    let practices: Vec<PracticeRow> = out
        .practices
        .labels
        .iter()
        .map(|(plot, p)| PracticeRow {
            plot: plot.clone(),
            practice: *p,
        })
        .collect();
    io::write_csv(&dir.join("practices.csv"), &practices)?;
    write_diagnostics(&dir, &out.diagnostics)?;
    let upstream = input.is_none().then_some(survey_dir.as_path());
    write_manifest(ctx, "ingest", &dir, Some(&survey_dir), upstream)?;
    let dropped = data.households.len() - out.model.households.len();
    eprintln!(
        "model: {} households, {} activities; {} cleaning actions",
        out.model.households.len(),
        out.model.activities.len(),
        out.cleaning.len()
    );
    let invalid = hhsim_core::types::validate_model(&out.model.households, &out.model.activities, &out.model.prices);
    if dropped > 0 || !invalid.is_empty() {
        let mut all = out.diagnostics.clone();
        all.extend(invalid);
        write_diagnostics(&dir, &all)?;
        return Err(DiagnosticsRaised(dropped.max(all.len())).into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FarmClassRow {
    pub household: HouseholdId,
    pub region: String,
    pub size: SizeClass,
    pub specialization: Specialization,
    pub economic_value: f64,
}

fn read_classes(dir: &Path) -> Result<BTreeMap<HouseholdId, FarmClass>> {
    let rows: Vec<FarmClassRow> = io::read_csv(&dir.join("farm_classes.csv"))?;
    Ok(rows
        .into_iter()
        .map(|r| {
            (
                r.household,
                FarmClass {
                    size: r.size,
                    specialization: r.specialization,
                    economic_value: r.economic_value,
                },
            )
        })
        .collect())
}

fn cmd_typology(ctx: &RunContext) -> Result<()> {
    let model_dir = ctx.upstream("model", "ingest")?;
    let model = io::read_model(&model_dir)?;
    let classes = pipeline::classify(&model);
    let rows: Vec<FarmClassRow> = model
        .households
        .iter()
        .map(|h| {
            let c = classes[&h.id];
            FarmClassRow {
                household: h.id.clone(),
                region: h.region.to_string(),
                size: c.size,
                specialization: c.specialization,
                economic_value: c.economic_value,
            }
        })
        .collect();
    let dir = ctx.fresh_dir("typology")?;
    io::write_csv(&dir.join("farm_classes.csv"), &rows)?;
    write_manifest(ctx, "typology", &dir, Some(&model_dir), Some(&model_dir))?;
    Ok(())
}

fn cmd_calibrate(ctx: &RunContext) -> Result<()> {
    let model_dir = ctx.upstream("model", "ingest")?;
    let typology_dir = ctx.upstream("typology", "typology")?;
    let model = io::read_model(&model_dir)?;
    let classes = read_classes(&typology_dir)?;
    let cal = pipeline::calibrate(&model, &classes, &ctx.config);
    let dir = ctx.fresh_dir("calibration")?;
    io::write_calibration(&dir, &cal.households)?;
    write_diagnostics(&dir, &cal.diagnostics)?;
    write_manifest(ctx, "calibrate", &dir, Some(&model_dir), Some(&typology_dir))?;
    let worst = cal
        .households
        .values()
        .flat_map(|c| c.report.iter().map(|r| r.residual))
        .fold(0.0f64, f64::max);
    eprintln!(
        "calibrated {} of {} households; worst relative residual {worst:.2e}",
        cal.households.len(),
        model.households.len()
    );
    if cal.households.is_empty() {
        bail!("no household could be calibrated");
    }
    if !cal.diagnostics.is_empty() {
        return Err(DiagnosticsRaised(cal.diagnostics.len()).into());
    }
    Ok(())
}

fn cmd_baseline(ctx: &RunContext) -> Result<()> {
    let model_dir = ctx.upstream("model", "ingest")?;
    let cal_dir = ctx.upstream("calibration", "calibrate")?;
    let model = io::read_model(&model_dir)?;
    let cals = io::read_calibration(&cal_dir)?;
    let (projected, projected_cals) = scenario::project_baseline(&model, &cals, &ctx.config.baseline)?;
    let dir = ctx.fresh_dir("baseline")?;
    fs::create_dir_all(dir.join("model"))?;
    fs::create_dir_all(dir.join("calibration"))?;
    io::write_model(&dir.join("model"), &projected)?;
    io::write_calibration(&dir.join("calibration"), &projected_cals)?;
    io::write_json(&dir.join("spec.json"), &ctx.config.baseline)?;
    write_manifest(ctx, "baseline", &dir, Some(&cal_dir), Some(&cal_dir))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioIndexEntry {
    pub name: String,
    pub policy: SubsidyPolicy,
    pub totals: ScenarioTotals,
}

#[derive(Serialize)]
struct HouseholdRow<'a> {
    household: &'a HouseholdId,
    area_ha: f64,
    fertilizer_kg: f64,
    subsidized_kg: f64,
    farm_income: f64,
    total_income: f64,
    subsidy_outlay: f64,
}

fn cmd_simulate(ctx: &RunContext) -> Result<()> {
    ctx.upstream("calibration", "calibrate")?;
    let base_dir = ctx.upstream("baseline", "baseline")?;
    let model = io::read_model(&base_dir.join("model"))?;
    let cals = io::read_calibration(&base_dir.join("calibration"))?;
    let results = pipeline::simulate(&model, &cals, &ctx.config)?;
    let dir = ctx.fresh_dir("scenarios")?;
    let mut index = Vec::new();
    for r in &results {
        let sdir = dir.join(&r.name);
        fs::create_dir_all(&sdir)?;
        let solutions: Vec<&Solution> = r.solutions.values().collect();
        io::write_json(&sdir.join("solutions.json"), &solutions)?;
        let rows: Vec<HouseholdRow> = solutions
            .iter()
            .map(|s| HouseholdRow {
                household: &s.household,
                area_ha: s.area(),
                fertilizer_kg: s.fertilizer_kg(),
                subsidized_kg: s.fertilizer_subsidized_kg,
                farm_income: s.farm_income,
                total_income: s.total_income,
                subsidy_outlay: s.subsidy_outlay,
            })
            .collect();
        io::write_csv(&sdir.join("households.csv"), &rows)?;
        write_diagnostics(&sdir, &r.diagnostics)?;
        index.push(ScenarioIndexEntry {
            name: r.name.clone(),
            policy: r.policy.clone(),
            totals: r.totals,
        });
        eprintln!(
            "{}: fertilizer {:.0} kg, income {:.0}, outlay {:.0}",
            r.name, r.totals.fertilizer_kg, r.totals.total_income, r.totals.subsidy_outlay
        );
    }
    io::write_json(&dir.join("index.json"), &index)?;
    write_manifest(ctx, "simulate", &dir, Some(&base_dir), Some(&base_dir))?;
    Ok(())
}

/// Load scenario results written by `simulate`, in run order.
pub fn read_results(dir: &Path) -> Result<Vec<ScenarioResult>> {
    let index: Vec<ScenarioIndexEntry> = io::read_json(&dir.join("index.json"))?;
    index
        .into_iter()
        .map(|e| {
            let solutions: Vec<Solution> = io::read_json(&dir.join(&e.name).join("solutions.json"))?;
            Ok(ScenarioResult {
                name: e.name,
                policy: e.policy,
                solutions: solutions.into_iter().map(|s| (s.household.clone(), s)).collect(),
                totals: e.totals,
                diagnostics: Vec::new(),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct PlotRow<'a> {
    scenario: &'a str,
    group: &'a str,
    indicator: &'a str,
    value: Option<f64>,
    change_pct: Option<f64>,
}

fn cmd_report(ctx: &RunContext, group_by: &str, plot_data: bool) -> Result<()> {
    let group_by = GroupBy::parse(group_by)
        .ok_or_else(|| anyhow!("unknown grouping `{group_by}`; use national, region, size_class, specialization or crop"))?;
    let typology_dir = ctx.upstream("typology", "typology")?;
    let base_dir = ctx.upstream("baseline", "baseline")?;
    let scen_dir = ctx.upstream("scenarios", "simulate")?;
    let model = io::read_model(&base_dir.join("model"))?;
    let classes = read_classes(&typology_dir)?;
    let results = read_results(&scen_dir)?;
    let reports = pipeline::reports(&model, &classes, &results, group_by)?;

    fs::create_dir_all(ctx.dir("reports"))?;
    let dir = ctx.dir("reports").join(group_by.as_str());
    if dir.exists() {
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(&dir)?;
    let mut cost_benefit = BTreeMap::new();
    let mut plot_rows = Vec::new();
    for r in &reports {
        let path = dir.join(format!("{}_indicators.csv", r.name));
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        r.table.write_csv(file)?;
        if let Some(cmp) = &r.comparison {
            io::write_csv(&dir.join(format!("{}_vs_baseline.csv", r.name)), cmp)?;
        }
        if let Some(d) = &r.distribution {
            report::write_rows(&dir.join(format!("{}_income_curve.csv", r.name)), &d.points)?;
        }
        if let Some(cb) = r.cost_benefit {
            cost_benefit.insert(r.name.clone(), cb);
        }
        if plot_data {
            let change: BTreeMap<(&str, &str), Option<f64>> = r
                .comparison
                .iter()
                .flatten()
                .map(|c| ((c.group.as_str(), c.indicator.as_str()), c.change_pct))
                .collect();
            for row in &r.table.rows {
                plot_rows.push(PlotRow {
                    scenario: &r.name,
                    group: &row.group,
                    indicator: &row.indicator,
                    value: row.value,
                    change_pct: change.get(&(row.group.as_str(), row.indicator.as_str())).copied().flatten(),
                });
            }
        }
    }
    io::write_json(&dir.join("cost_benefit.json"), &cost_benefit)?;
    if plot_data {
        report::write_rows(&dir.join("plot_data.csv"), &plot_rows)?;
    }
    write_manifest(ctx, "report", &dir, Some(&scen_dir), Some(&scen_dir))?;
    eprintln!("wrote {} reports to {}", reports.len(), dir.display());
    Ok(())
}

/// Household model read back from a run directory's baseline stage.
pub fn baseline_model(out: &Path) -> Result<ModelInstance> {
    Ok(io::read_model(&out.join("baseline").join("model"))?)
}
