//! Positive mathematical programming calibration.
//!
//! A stage-one linear program over the observed activities yields resource
//! shadow prices. The quadratic term is seeded from target supply elasticities
//! and then adjusted by a fixed point on finite-difference elasticities of the
//! full constrained problem; the linear term is always set so that the
//! observed crop mix satisfies the first-order conditions exactly.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::household::{self, build_problem, solve_qp, ModelOptions};
use crate::qp::{self, LinearConstraint, QuadraticProgram, SolveOptions, WarmStart};
use crate::types::{
    Activity, ActivityId, BehavioralFunction, Diagnostic, Household, HouseholdId, ModelInstance,
    ProductId, Regime, Season, SubsidyPolicy,
};

/// Demand system parameters: marginal budget shares and committed quantities.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LesParameters {
    pub beta: BTreeMap<ProductId, f64>,
    pub gamma: BTreeMap<ProductId, f64>,
    /// Share of total income spent on the goods of the system.
    pub budget_share: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ActivityCalibration {
    pub activity: ActivityId,
    pub observed: f64,
    pub gross_margin: f64,
    pub d: f64,
    pub q: f64,
    /// Level returned by re-solving the calibrated model, relative error.
    pub residual: f64,
    pub alternative: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ElasticityCheck {
    pub household: HouseholdId,
    pub activity: ActivityId,
    pub target: f64,
    pub simulated: f64,
    /// Response limited by a resource corner or a kink; reported only.
    pub corner: bool,
}

impl ElasticityCheck {
    pub fn relative_error(&self) -> f64 {
        (self.simulated / self.target - 1.0).abs()
    }
}

/// Everything the household model needs from calibration.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HouseholdCalibration {
    pub household: HouseholdId,
    pub group: String,
    pub behavioral: BehavioralFunction,
    /// Per-ha margin added to attached alternatives so that their margin
    /// equals the group mean.
    pub margin_shift: BTreeMap<ActivityId, f64>,
    pub duals: BTreeMap<String, f64>,
    pub les: Option<LesParameters>,
    pub report: Vec<ActivityCalibration>,
    pub elasticities: Vec<ElasticityCheck>,
    pub iterations: usize,
}

impl HouseholdCalibration {
    pub fn activities(&self) -> impl Iterator<Item = &ActivityId> {
        self.behavioral.linear.keys()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ElasticityTargets {
    pub by_product: BTreeMap<ProductId, f64>,
    pub default_elasticity: f64,
}

impl Default for ElasticityTargets {
    fn default() -> Self {
        ElasticityTargets {
            by_product: BTreeMap::new(),
            default_elasticity: 0.8,
        }
    }
}

impl ElasticityTargets {
    pub fn get(&self, product: &ProductId) -> f64 {
        self.by_product
            .get(product)
            .copied()
            .unwrap_or(self.default_elasticity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationOptions {
    pub targets: ElasticityTargets,
    pub non_myopic: bool,
    pub max_iterations: usize,
    /// Relative elasticity tolerance.
    pub tolerance: f64,
    /// Relative price perturbation for finite differences.
    pub perturbation: f64,
    pub model: ModelOptions,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            targets: ElasticityTargets::default(),
            non_myopic: true,
            max_iterations: 50,
            tolerance: 0.05,
            perturbation: 0.01,
            model: ModelOptions::default(),
        }
    }
}

/// Per-ha gross margin at the given output and fertilizer prices.
pub fn gross_margin(activity: &Activity, output_price: f64, fertilizer_price: f64) -> Result<f64> {
    if activity.yield_per_ha < 0.0 || output_price < 0.0 || fertilizer_price < 0.0 {
        return Err(Error::InvalidInput(format!(
            "activity {}: negative revenue component",
            activity.id
        )));
    }
    Ok(activity.yield_per_ha * output_price + activity.production_subsidy
        - activity.input_costs.non_fertilizer()
        - fertilizer_price * activity.fertilizer_qty)
}

/// Observed fertilizer kg at the given levels.
fn fertilizer_use(levels: &BTreeMap<ActivityId, f64>, model: &ModelInstance) -> f64 {
    levels
        .iter()
        .filter_map(|(id, x)| model.activity(id).map(|a| a.fertilizer_qty * x))
        .sum()
}

/// Price of the marginal kg of fertilizer at the observed plan.
pub fn marginal_fertilizer_price(
    household: &Household,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
) -> f64 {
    let p = model.prices.fertilizer_market_price;
    let used = fertilizer_use(&household.observed_levels, model);
    if policy.subsidizes(household) && used <= policy.quota_kg {
        (1.0 - policy.rate) * p
    } else {
        p
    }
}

/// Effective output price per product at the base-year market position.
pub fn effective_prices(
    household: &Household,
    model: &ModelInstance,
) -> BTreeMap<ProductId, (Regime, f64)> {
    let regimes = household::base_regimes(household, model, &household.observed_consumption);
    let mut out = BTreeMap::new();
    for p in &model.products {
        let Some(price) = model.prices.product(&p.id) else {
            continue;
        };
        let regime = regimes.get(&p.id).copied().unwrap_or(Regime::Seller);
        let v = match regime {
            Regime::Seller => price.sell(),
            Regime::Buyer => price.buy(),
            Regime::Autarky => 0.5 * (price.sell() + price.buy()),
        };
        out.insert(p.id.clone(), (regime, v));
    }
    out
}

/// Resource-use coefficients of one activity, keyed like the constraint names.
fn resource_coefficients(act: &Activity, marginal_fert: f64) -> Vec<(String, f64)> {
    let season = act.season.as_str();
    vec![
        (format!("land_{season}"), 1.0),
        (format!("labor_{season}"), act.labor_req),
        (
            "cash".to_owned(),
            act.input_costs.cash_non_fertilizer() + marginal_fert * act.fertilizer_qty,
        ),
    ]
}

fn resource_cost(act: &Activity, marginal_fert: f64, duals: &BTreeMap<String, f64>) -> f64 {
    resource_coefficients(act, marginal_fert)
        .iter()
        .map(|(k, a)| a * duals.get(k).copied().unwrap_or(0.0))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    pub duals: BTreeMap<String, f64>,
    pub levels: BTreeMap<ActivityId, f64>,
    pub gross_margins: BTreeMap<ActivityId, f64>,
}

/// Shadow prices of land, labor and cash from the bounded linear program.
///
/// Duals of constraints that are slack at the observed plan are reported as
/// zero, so that the quadratic model built on them is exactly optimal there.
pub fn stage1_duals(
    household: &Household,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
) -> Result<StageOne> {
    const EPS: f64 = 1e-6;
    let observed: Vec<(&ActivityId, f64)> = household
        .observed_levels
        .iter()
        .map(|(k, v)| (k, *v))
        .collect();
    let acts: Vec<&Activity> = observed
        .iter()
        .map(|(id, _)| {
            model
                .activity(id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown activity {id}")))
        })
        .collect::<Result<_>>()?;
    let prices = effective_prices(household, model);
    let mf = marginal_fertilizer_price(household, model, policy);
    let n = acts.len();

    let mut gms = BTreeMap::new();
    let mut lp = QuadraticProgram::new(n);
    for (i, act) in acts.iter().enumerate() {
        let v = prices.get(&act.product).map(|x| x.1).unwrap_or(0.0);
        let gm = gross_margin(act, v, mf)?;
        gms.insert(act.id.clone(), gm);
        lp.linear[i] = -gm;
        lp.lower[i] = 0.0;
        lp.upper[i] = observed[i].1 * (1.0 + EPS);
    }

    let used = fertilizer_use(&household.observed_levels, model);
    let cash_rhs = household.cash_endowment
        + if policy.subsidizes(household) && used > policy.quota_kg {
            policy.rate * model.prices.fertilizer_market_price * policy.quota_kg
        } else {
            0.0
        };
    let mut names = Vec::new();
    let mut rhs_at = Vec::new();
    let mut rows: BTreeMap<String, (Vec<f64>, f64)> = BTreeMap::new();
    for season in Season::ALL {
        rows.insert(format!("land_{}", season.as_str()), (vec![0.0; n], household.land.get(season)));
        rows.insert(format!("labor_{}", season.as_str()), (vec![0.0; n], household.labor.get(season)));
    }
    rows.insert("cash".to_owned(), (vec![0.0; n], cash_rhs));
    for (i, act) in acts.iter().enumerate() {
        for (k, a) in resource_coefficients(act, mf) {
            rows.get_mut(&k).expect("known row").0[i] = a;
        }
    }
    for (name, (coeffs, rhs)) in rows {
        if coeffs.iter().all(|v| *v == 0.0) {
            continue;
        }
        let at_obs: f64 = coeffs.iter().zip(&observed).map(|(a, (_, x))| a * x).sum();
        let scale = coeffs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = 1e-9 * rhs.abs().max(at_obs.abs()).max(1.0);
        if at_obs > rhs + tol {
            return Err(Error::Infeasible(format!(
                "household {}: observed plan exceeds {name} ({at_obs} > {rhs})",
                household.id
            )));
        }
        let _ = scale;
        lp.inequalities.push(LinearConstraint::new(coeffs, rhs));
        names.push(name);
        rhs_at.push((rhs - at_obs) <= tol);
    }
    let mut sol = qp::solve(&lp, &SolveOptions::default())?;
    // When cash binds together with land or labor the LP is degenerate and
    // its cash dual only prices reallocations of size EPS between crops.
    // The rent is given to the fixed factors instead; any nonnegative dual
    // on a tight row keeps the observed plan exactly optimal.
    if let Some(k) = names.iter().position(|n| n == "cash") {
        let fixed_tight = (0..names.len()).any(|j| j != k && rhs_at[j]);
        if rhs_at[k] && fixed_tight && sol.ineq_duals[k] > 0.0 {
            let mut relaxed = lp.clone();
            relaxed.inequalities.remove(k);
            let alt = qp::solve(&relaxed, &SolveOptions::default())?;
            let mut ineq_duals = alt.ineq_duals.clone();
            ineq_duals.insert(k, 0.0);
            sol = alt;
            sol.ineq_duals = ineq_duals;
        }
    }
    let mut duals = BTreeMap::new();
    for (k, name) in names.iter().enumerate() {
        let value = if rhs_at[k] { sol.ineq_duals[k] } else { 0.0 };
        duals.insert(name.clone(), value);
    }
    let levels = observed
        .iter()
        .enumerate()
        .map(|(i, (id, _))| ((*id).clone(), sol.x[i]))
        .collect();
    Ok(StageOne {
        duals,
        levels,
        gross_margins: gms,
    })
}

/// Set `d` so the observed plan satisfies the first-order conditions.
fn reset_linear(
    behavioral: &mut BehavioralFunction,
    household: &Household,
    model: &ModelInstance,
    gms: &BTreeMap<ActivityId, f64>,
    mf: f64,
    duals: &BTreeMap<String, f64>,
) {
    for (id, x0) in &household.observed_levels {
        let act = model.activity(id).expect("validated activity");
        let d = gms[id] - behavioral.q_diag(id) * x0 - resource_cost(act, mf, duals);
        behavioral.linear.insert(id.clone(), d);
    }
}

fn tight_set(inst: &household::ProblemInstance, z: &[f64]) -> BTreeSet<(u8, usize)> {
    let qp = &inst.qp;
    let mut out = BTreeSet::new();
    for (k, row) in qp.inequalities.iter().enumerate() {
        let lhs: f64 = row.coeffs.iter().zip(z).map(|(a, b)| a * b).sum();
        let norm = row.coeffs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if (row.rhs - lhs) <= 1e-9 * norm * (1.0 + z.iter().fold(0.0f64, |m, v| m.max(v.abs()))) {
            out.insert((0, k));
        }
    }
    for j in 0..qp.dim() {
        let scale = 1e-9 * (1.0 + z[j].abs());
        if z[j] - qp.lower[j] <= scale {
            out.insert((1, j));
        }
        if qp.upper[j] - z[j] <= scale {
            out.insert((2, j));
        }
    }
    out
}

/// Whether activity column `i` can move without leaving the tight constraints.
fn pinned(inst: &household::ProblemInstance, tight: &BTreeSet<(u8, usize)>, i: usize) -> bool {
    let qp = &inst.qp;
    let m = qp.dim();
    let mut rows: Vec<Vec<f64>> = qp.equalities.iter().map(|r| r.coeffs.clone()).collect();
    for (kind, k) in tight {
        match kind {
            0 => rows.push(qp.inequalities[*k].coeffs.clone()),
            _ => {
                let mut e = vec![0.0; m];
                e[*k] = 1.0;
                rows.push(e);
            }
        }
    }
    for r in rows.iter_mut() {
        let norm = r.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if norm > 0.0 {
            r.iter_mut().for_each(|v| *v /= norm);
        }
    }
    if rows.is_empty() {
        return false;
    }
    let a = DMatrix::from_fn(rows.len(), m, |r, c| rows[r][c]);
    let gram = a.transpose() * a;
    let eig = nalgebra::SymmetricEigen::new(gram);
    let emax = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(*v));
    let tol = 1e-10 * emax.max(1.0);
    let movable = (0..m)
        .filter(|&c| eig.eigenvalues[c] <= tol)
        .any(|c| eig.eigenvectors[(i, c)].abs() > 1e-8);
    !movable
}

struct ElasticityProbe<'a> {
    household: &'a Household,
    model: &'a ModelInstance,
    policy: &'a SubsidyPolicy,
    regimes: BTreeMap<ProductId, Regime>,
    revenue: BTreeMap<ActivityId, f64>,
    targets: BTreeMap<ActivityId, f64>,
    delta: f64,
    options: ModelOptions,
}

impl ElasticityProbe<'_> {
    fn solve(
        &self,
        cal: &HouseholdCalibration,
    ) -> Result<(household::ProblemInstance, Vec<f64>)> {
        let inst = build_problem(
            self.household,
            cal,
            self.model,
            self.policy,
            &self.regimes,
            &self.household.observed_consumption,
            &self.options,
        )?;
        let start = inst.start_point(&self.household.observed_levels);
        let warm = WarmStart {
            active: (0..inst.qp.inequalities.len()).collect(),
            point: start,
        };
        let sol = qp::solve(
            &inst.qp,
            &SolveOptions {
                warm_start: Some(warm),
                ..Default::default()
            },
        )?;
        Ok((inst, sol.x))
    }

    /// Central finite-difference own-price elasticity for every observed activity.
    fn measure(&self, cal: &HouseholdCalibration) -> Result<Vec<ElasticityCheck>> {
        let (base_inst, base) = self.solve(cal)?;
        let base_tight = tight_set(&base_inst, &base);
        let mut out = Vec::new();
        for (i, id) in base_inst.activities.iter().enumerate() {
            let x0 = self.household.observed_levels[id];
            let shift = self.delta * self.revenue[id];
            let mut levels = [0.0; 2];
            let mut corner = pinned(&base_inst, &base_tight, i) || shift <= 0.0;
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut perturbed = cal.clone();
                *perturbed.behavioral.linear.get_mut(id).expect("observed") -= sign * shift;
                let (inst, z) = self.solve(&perturbed)?;
                if tight_set(&inst, &z) != base_tight {
                    corner = true;
                }
                levels[k] = z[i];
            }
            let simulated = (levels[0] - levels[1]) / (2.0 * self.delta * x0);
            if simulated <= 0.0 {
                corner = true;
            }
            out.push(ElasticityCheck {
                household: self.household.id.clone(),
                activity: id.clone(),
                target: self.targets[id],
                simulated,
                corner,
            });
        }
        Ok(out)
    }
}

/// Lower bound on a calibrated quadratic term, relative to its myopic seed.
/// Targets that a binding resource puts out of reach would otherwise drive
/// the term towards zero.
const Q_FLOOR: f64 = 1e-2;

/// Retune missed activities one at a time, keeping a change only when more
/// activities end up on target.
///
/// When a binding resource couples the activities (two crops sharing all the
/// land respond with a single degree of freedom) the targets cannot all be
/// met; the fixed point then settles on a compromise that may miss every one.
fn maximize_hits(
    probe: &ElasticityProbe,
    mut cal: HouseholdCalibration,
    mut checks: Vec<ElasticityCheck>,
    floors: &BTreeMap<ActivityId, f64>,
    reset: &dyn Fn(&mut BehavioralFunction),
    tol: f64,
) -> (HouseholdCalibration, Vec<ElasticityCheck>) {
    let missed: Vec<ActivityId> = checks
        .iter()
        .filter(|c| !c.corner && c.relative_error() > tol)
        .map(|c| c.activity.clone())
        .collect();
    for id in missed {
        let current = score(&checks, tol);
        let q0 = cal.behavioral.q_diag(&id);
        let eval = |s: f64| -> Option<(HouseholdCalibration, Vec<ElasticityCheck>, f64)> {
            let mut c = cal.clone();
            c.behavioral.set_diag(&id, (q0 * s.exp()).max(floors[&id]));
            reset(&mut c.behavioral);
            let k = probe.measure(&c).ok()?;
            let gap = k
                .iter()
                .find(|e| e.activity == id && !e.corner)
                .map(|e| e.simulated / e.target - 1.0)?;
            Some((c, k, gap))
        };
        let mut best: Option<(HouseholdCalibration, Vec<ElasticityCheck>, (usize, f64))> = None;
        let mut keep = |c: HouseholdCalibration, k: Vec<ElasticityCheck>| {
            let s = score(&k, tol);
            let ahead = match &best {
                Some(b) => s.0 > b.2 .0 || (s.0 == b.2 .0 && s.1 < b.2 .1),
                None => s.0 > current.0,
            };
            if ahead {
                best = Some((c, k, s));
            }
        };
        let base_gap = checks
            .iter()
            .find(|e| e.activity == id)
            .map(|e| e.simulated / e.target - 1.0)
            .unwrap_or(f64::NAN);
        let mut prev = (0.0, base_gap);
        let mut bracket = None;
        for s in [-0.25, -0.5, -1.0, -2.0, -4.0, 0.25, 0.5, 1.0, 2.0, 4.0] {
            if s == 0.25 {
                prev = (0.0, base_gap);
            }
            let Some((c, k, gap)) = eval(s) else { continue };
            if bracket.is_none() && gap * prev.1 < 0.0 {
                bracket = Some((prev, (s, gap)));
            }
            prev = (s, gap);
            keep(c, k);
        }
        if let Some(((mut lo, mut glo), (mut hi, _))) = bracket {
            for _ in 0..30 {
                let mid = 0.5 * (lo + hi);
                let Some((c, k, gap)) = eval(mid) else { break };
                let done = gap.abs() <= 0.25 * tol;
                keep(c, k);
                if done {
                    break;
                }
                if gap * glo > 0.0 {
                    (lo, glo) = (mid, gap);
                } else {
                    hi = mid;
                }
            }
        }
        if let Some((c, k, _)) = best {
            cal = c;
            checks = k;
        }
    }
    (cal, checks)
}

fn score(checks: &[ElasticityCheck], tol: f64) -> (usize, f64) {
    let mut hits = 0;
    let mut worst = 0.0f64;
    for c in checks.iter().filter(|c| !c.corner) {
        let e = c.relative_error();
        if e <= tol {
            hits += 1;
        }
        worst = worst.max(e);
    }
    (hits, worst)
}

/// Calibrate the household's observed activities.
pub fn calibrate_pmp(
    household: &Household,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    options: &CalibrationOptions,
) -> Result<HouseholdCalibration> {
    for (id, x) in &household.observed_levels {
        if *x <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "household {}: observed level of {id} is not positive",
                household.id
            )));
        }
    }
    let stage = stage1_duals(household, model, policy)?;
    let prices = effective_prices(household, model);
    let mf = marginal_fertilizer_price(household, model, policy);

    let mut cal = HouseholdCalibration {
        household: household.id.clone(),
        duals: stage.duals.clone(),
        ..Default::default()
    };
    let mut revenue = BTreeMap::new();
    let mut targets = BTreeMap::new();
    for (id, x0) in &household.observed_levels {
        let act = model.activity(id).expect("checked in stage one");
        let v = prices.get(&act.product).map(|p| p.1).unwrap_or(0.0);
        let eps = options.targets.get(&act.product);
        if eps <= 0.0 {
            return Err(Error::InvalidInput(format!("non-positive elasticity target for {}", act.product)));
        }
        let r = v * act.yield_per_ha;
        cal.behavioral.set_diag(id, r.max(1.0) / (eps * x0));
        revenue.insert(id.clone(), r);
        targets.insert(id.clone(), eps);
    }
    reset_linear(&mut cal.behavioral, household, model, &stage.gross_margins, mf, &stage.duals);
    let floors: BTreeMap<ActivityId, f64> = cal
        .behavioral
        .quadratic
        .iter()
        .map(|((a, _), q)| (a.clone(), Q_FLOOR * q))
        .collect();
    let reset = |b: &mut BehavioralFunction| {
        reset_linear(b, household, model, &stage.gross_margins, mf, &stage.duals)
    };

    let probe = ElasticityProbe {
        household,
        model,
        policy,
        regimes: household::base_regimes(household, model, &household.observed_consumption),
        revenue,
        targets,
        delta: options.perturbation,
        options: options.model,
    };

    let mut checks = probe.measure(&cal)?;
    if options.non_myopic && !household.observed_levels.is_empty() {
        // The internal tolerance is tighter than the reporting one so that the
        // finite-difference noise does not sit right on the boundary.
        let internal = 0.4 * options.tolerance;
        let mut best = (cal.clone(), checks.clone(), score(&checks, options.tolerance));
        let mut omega = 1.0;
        let mut prev_worst = f64::INFINITY;
        for iter in 0..options.max_iterations {
            let (_, worst) = score(&checks, internal);
            cal.iterations = iter;
            if worst <= internal {
                break;
            }
            if worst > prev_worst {
                omega = (omega * 0.5f64).max(0.05);
            }
            prev_worst = worst;
            for c in checks.iter().filter(|c| !c.corner) {
                let q = cal.behavioral.q_diag(&c.activity);
                let factor = (c.simulated / c.target).powf(omega);
                cal.behavioral.set_diag(&c.activity, (q * factor).max(floors[&c.activity]));
            }
            reset(&mut cal.behavioral);
            checks = probe.measure(&cal)?;
            let s = score(&checks, options.tolerance);
            if s.0 > best.2 .0 || (s.0 == best.2 .0 && s.1 < best.2 .1) {
                best = (cal.clone(), checks.clone(), s);
            }
        }
        let iterations = cal.iterations;
        (cal, checks) = maximize_hits(&probe, best.0, best.1, &floors, &reset, options.tolerance);
        cal.iterations = iterations;
    }
    cal.elasticities = checks;
    cal.report = household
        .observed_levels
        .iter()
        .map(|(id, x0)| ActivityCalibration {
            activity: id.clone(),
            observed: *x0,
            gross_margin: stage.gross_margins[id],
            d: cal.behavioral.d(id),
            q: cal.behavioral.q_diag(id),
            residual: 0.0,
            alternative: false,
        })
        .collect();
    Ok(cal)
}

/// Group means of gross margin and quadratic term per observed activity.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupStats {
    pub stats: BTreeMap<(String, ActivityId), (f64, f64)>,
}

impl GroupStats {
    pub fn get(&self, group: &str, activity: &ActivityId) -> Option<(f64, f64)> {
        self.stats.get(&(group.to_owned(), activity.clone())).copied()
    }

    pub fn activities<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a ActivityId> + 'a {
        self.stats
            .keys()
            .filter(move |(g, _)| g == group)
            .map(|(_, a)| a)
    }
}

pub fn group_stats(calibrations: &BTreeMap<HouseholdId, HouseholdCalibration>) -> GroupStats {
    let mut acc: BTreeMap<(String, ActivityId), (f64, f64, usize)> = BTreeMap::new();
    for cal in calibrations.values() {
        for row in cal.report.iter().filter(|r| !r.alternative) {
            let e = acc
                .entry((cal.group.clone(), row.activity.clone()))
                .or_insert((0.0, 0.0, 0));
            e.0 += row.gross_margin;
            e.1 += row.q;
            e.2 += 1;
        }
    }
    GroupStats {
        stats: acc
            .into_iter()
            .map(|(k, (gm, q, n))| (k, (gm / n as f64, q / n as f64)))
            .collect(),
    }
}

/// Add the group's other activities at zero level.
pub fn attach_alternatives(
    cal: &mut HouseholdCalibration,
    household: &Household,
    stats: &GroupStats,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
) -> Result<()> {
    let candidates: Vec<ActivityId> = stats.activities(&cal.group).cloned().collect();
    if candidates.is_empty() {
        return Err(Error::Empty(format!("calibration group {}", cal.group)));
    }
    let prices = effective_prices(household, model);
    let mf = marginal_fertilizer_price(household, model, policy);
    for id in candidates {
        if cal.behavioral.linear.contains_key(&id) {
            continue;
        }
        let act = model
            .activity(&id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown activity {id}")))?;
        let (gm_group, q_group) = stats.get(&cal.group, &id).expect("listed");
        let v = prices.get(&act.product).map(|p| p.1).unwrap_or(0.0);
        let gm_own = gross_margin(act, v, mf)?;
        let d = gm_group - resource_cost(act, mf, &cal.duals);
        cal.behavioral.linear.insert(id.clone(), d);
        cal.behavioral.set_diag(&id, q_group);
        cal.margin_shift.insert(id.clone(), gm_group - gm_own);
        cal.report.push(ActivityCalibration {
            activity: id.clone(),
            observed: 0.0,
            gross_margin: gm_group,
            d,
            q: q_group,
            residual: 0.0,
            alternative: true,
        });
    }
    Ok(())
}

/// Prior-anchored estimation of the demand system.
///
/// Given committed quantities `gamma`, the marginal shares that reproduce the
/// observed consumption are `beta_j = p_j (c_j - gamma_j) / (Y - sum gamma p)`,
/// which sum to one when the budget `Y` is the observed food expenditure. The
/// remaining freedom in `gamma` is fixed by weighted least squares towards the
/// priors with a bounded Levenberg-Marquardt iteration.
pub fn estimate_les(
    consumption: &BTreeMap<ProductId, f64>,
    prices: &BTreeMap<ProductId, f64>,
    prior_beta: &BTreeMap<ProductId, f64>,
    prior_gamma: &BTreeMap<ProductId, f64>,
    income: f64,
) -> Result<LesParameters> {
    let goods: Vec<&ProductId> = consumption.keys().collect();
    let n = goods.len();
    if n == 0 {
        return Err(Error::Empty("observed consumption".into()));
    }
    let c: Vec<f64> = goods.iter().map(|g| consumption[*g]).collect();
    let p: Vec<f64> = goods
        .iter()
        .map(|g| {
            prices
                .get(*g)
                .copied()
                .filter(|v| *v > 0.0)
                .ok_or_else(|| Error::InvalidInput(format!("no positive price for {g}")))
        })
        .collect::<Result<_>>()?;
    let b0: Vec<f64> = goods.iter().map(|g| prior_beta.get(*g).copied().unwrap_or(0.0)).collect();
    let g0: Vec<f64> = goods.iter().map(|g| prior_gamma.get(*g).copied().unwrap_or(0.0)).collect();
    for j in 0..n {
        if g0[j] > c[j] || g0[j] < 0.0 {
            return Err(Error::InvalidInput(format!(
                "infeasible priors: committed quantity of {} outside [0, {}]",
                goods[j], c[j]
            )));
        }
    }
    let budget: f64 = c.iter().zip(&p).map(|(a, b)| a * b).sum();
    if budget <= 0.0 {
        return Err(Error::InvalidInput("zero food expenditure".into()));
    }
    let sb: Vec<f64> = b0.iter().map(|b| 0.2 * b.abs().max(1e-3)).collect();
    let sg: Vec<f64> = g0
        .iter()
        .zip(&c)
        .map(|(g, c)| 0.2 * g.abs().max(1e-3 * c.max(1.0)))
        .collect();

    let beta_of = |gamma: &[f64]| -> Option<Vec<f64>> {
        let denom: f64 = (0..n).map(|j| p[j] * (c[j] - gamma[j])).sum();
        if denom <= 1e-12 * budget {
            return None;
        }
        Some((0..n).map(|j| p[j] * (c[j] - gamma[j]) / denom).collect())
    };
    let residuals = |gamma: &[f64]| -> Option<DVector<f64>> {
        let beta = beta_of(gamma)?;
        Some(DVector::from_fn(2 * n, |k, _| {
            if k < n {
                (beta[k] - b0[k]) / sb[k]
            } else {
                (gamma[k - n] - g0[k - n]) / sg[k - n]
            }
        }))
    };

    let mut gamma = g0.clone();
    // Keep the start strictly inside the region where beta is defined.
    if beta_of(&gamma).is_none() {
        gamma.iter_mut().zip(&c).for_each(|(g, c)| *g = 0.5 * c);
    }
    let mut r = residuals(&gamma).expect("interior start");
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    for _ in 0..200 {
        let beta = beta_of(&gamma).expect("current iterate is valid");
        let denom: f64 = (0..n).map(|j| p[j] * (c[j] - gamma[j])).sum();
        let jac = DMatrix::from_fn(2 * n, n, |row, k| {
            if row < n {
                let j = row;
                let dj = if j == k { -p[j] } else { 0.0 };
                (dj + beta[j] * p[k]) / denom / sb[j]
            } else if row - n == k {
                1.0 / sg[k]
            } else {
                0.0
            }
        });
        let jt = jac.transpose();
        let grad = &jt * &r;
        if grad.amax() <= 1e-14 {
            break;
        }
        let mut accepted = false;
        for _ in 0..30 {
            let mut lhs = &jt * &jac;
            for k in 0..n {
                lhs[(k, k)] += mu * (1.0 + lhs[(k, k)]);
            }
            let Some(step) = lhs.cholesky().map(|ch| ch.solve(&(-&grad))) else {
                mu *= 10.0;
                continue;
            };
            let trial: Vec<f64> = (0..n)
                .map(|k| (gamma[k] + step[k]).clamp(0.0, c[k]))
                .collect();
            if let Some(rt) = residuals(&trial) {
                let ct = rt.norm_squared();
                if ct < cost {
                    let moved = (0..n).fold(0.0f64, |m, k| m.max((trial[k] - gamma[k]).abs()));
                    gamma = trial;
                    r = rt;
                    let gain = cost - ct;
                    cost = ct;
                    mu = (mu * 0.3).max(1e-12);
                    accepted = true;
                    if gain <= 1e-16 * cost.max(1.0) || moved <= 1e-14 {
                        return finish(&goods, &gamma, beta_of, budget, income);
                    }
                    break;
                }
            }
            mu *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    finish(&goods, &gamma, beta_of, budget, income)
}

fn finish(
    goods: &[&ProductId],
    gamma: &[f64],
    beta_of: impl Fn(&[f64]) -> Option<Vec<f64>>,
    budget: f64,
    income: f64,
) -> Result<LesParameters> {
    let mut beta = beta_of(gamma).ok_or_else(|| Error::InvalidInput("degenerate demand system".into()))?;
    let total: f64 = beta.iter().sum();
    beta.iter_mut().for_each(|b| *b /= total);
    Ok(LesParameters {
        beta: goods.iter().map(|g| (*g).clone()).zip(beta).collect(),
        gamma: goods.iter().map(|g| (*g).clone()).zip(gamma.iter().copied()).collect(),
        budget_share: if income > 0.0 { budget / income } else { 1.0 },
    })
}

/// Outcome of calibrating a whole population.
#[derive(Debug, Clone, Default)]
pub struct PopulationCalibration {
    pub households: BTreeMap<HouseholdId, HouseholdCalibration>,
    pub groups: GroupStats,
    pub diagnostics: Vec<Diagnostic>,
}

/// Two-pass calibration: per-household terms, then group alternatives.
///
/// `groups` assigns each household to its calibration group. After
/// alternatives are attached every household is re-solved at base conditions
/// and the relative deviation from the observed plan is stored per activity.
pub fn calibrate_population(
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    groups: &BTreeMap<HouseholdId, String>,
    options: &CalibrationOptions,
) -> PopulationCalibration {
    let first: Vec<(HouseholdId, Result<HouseholdCalibration>)> = model
        .households
        .par_iter()
        .map(|h| {
            let res = calibrate_pmp(h, model, policy, options).map(|mut cal| {
                cal.group = groups.get(&h.id).cloned().unwrap_or_default();
                cal
            });
            (h.id.clone(), res)
        })
        .collect();
    let mut diagnostics = Vec::new();
    let mut households = BTreeMap::new();
    for (id, res) in first {
        match res {
            Ok(cal) => {
                households.insert(id, cal);
            }
            Err(e) => diagnostics.push(Diagnostic::new(format!("household {id}"), e.to_string())),
        }
    }
    let stats = group_stats(&households);

    let by_id: BTreeMap<&HouseholdId, &Household> =
        model.households.iter().map(|h| (&h.id, h)).collect();
    let second: Vec<(HouseholdId, Result<HouseholdCalibration>)> = households
        .into_par_iter()
        .map(|(id, mut cal)| {
            let h = by_id[&id];
            let res = attach_alternatives(&mut cal, h, &stats, model, policy)
                .and_then(|_| record_residuals(&mut cal, h, model, policy, &options.model))
                .map(|_| cal);
            (id, res)
        })
        .collect();
    let mut households = BTreeMap::new();
    for (id, res) in second {
        match res {
            Ok(cal) => {
                households.insert(id, cal);
            }
            Err(e) => diagnostics.push(Diagnostic::new(format!("household {id}"), e.to_string())),
        }
    }
    diagnostics.sort();
    PopulationCalibration {
        households,
        groups: stats,
        diagnostics,
    }
}

/// Re-solve at base conditions and store the per-activity relative deviation.
pub fn record_residuals(
    cal: &mut HouseholdCalibration,
    household: &Household,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    options: &ModelOptions,
) -> Result<f64> {
    let sol = household::solve_household(household, cal, model, policy, options)?;
    let mut worst = 0.0f64;
    for row in cal.report.iter_mut() {
        let x = sol.levels.get(&row.activity).copied().unwrap_or(0.0);
        row.residual = (x - row.observed).abs() / row.observed.max(1.0);
        worst = worst.max(row.residual);
    }
    Ok(worst)
}

/// Solve the calibrated household with fixed base regimes (no enumeration).
pub fn solve_base(
    household: &Household,
    cal: &HouseholdCalibration,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    options: &ModelOptions,
) -> Result<crate::types::Solution> {
    let regimes = household::base_regimes(household, model, &household.observed_consumption);
    let inst = build_problem(
        household,
        cal,
        model,
        policy,
        &regimes,
        &household.observed_consumption,
        options,
    )?;
    solve_qp(&inst, None).map(|(s, _)| s)
}
