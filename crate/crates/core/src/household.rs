//! Per-household optimization problem.
//!
//! Decision variables are the activity levels `x` followed by two fertilizer
//! purchase tranches: subsidized kg (bounded by the quota, zero when the
//! household is not eligible) and unsubsidized kg. Market participation is
//! handled by fixing a regime per product and eliminating sales and purchases:
//!
//! * seller: `s = q - c >= 0`, output valued at `p * t_s`;
//! * buyer: `b = c - q >= 0`, output valued at `p * t_b`;
//! * autarky: `q = c`, internal price given by the balance multiplier.
//!
//! Every regime carries the same constant `p * c` for committed consumption,
//! so income is continuous across regime switches and the best regime is the
//! optimum of the joint (concave, piecewise-linear revenue) problem.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::calibration::HouseholdCalibration;
use crate::error::{Error, Result};
use crate::qp::{self, LinearConstraint, QuadraticProgram, SolveOptions, WarmStart};
use crate::types::{
    Activity, ActivityId, Diagnostic, Household, HouseholdId, KktReport, ModelInstance, ProductId,
    Regime, Season, Solution, SubsidyPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuotaSplit {
    pub subsidized_kg: f64,
    pub unsubsidized_kg: f64,
    pub cost: f64,
}

/// Split a fertilizer demand into the subsidized and market tranches.
pub fn apply_quota(
    demand_kg: f64,
    policy: &SubsidyPolicy,
    household: &Household,
    market_price: f64,
) -> QuotaSplit {
    let demand = demand_kg.max(0.0);
    let subsidized = if policy.subsidizes(household) {
        demand.min(policy.quota_kg)
    } else {
        0.0
    };
    let unsubsidized = demand - subsidized;
    QuotaSplit {
        subsidized_kg: subsidized,
        unsubsidized_kg: unsubsidized,
        cost: subsidized * (1.0 - policy.rate) * market_price + unsubsidized * market_price,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelOptions {
    /// Solve consumption jointly through the household's demand system.
    pub consumption_enabled: bool,
    /// Above this many products with a free regime choice, regimes are
    /// searched by local flips instead of full enumeration.
    pub max_enumerated: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        ModelOptions {
            consumption_enabled: false,
            max_enumerated: 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MarketRow {
    None,
    Ineq(usize),
    Eq(usize),
}

/// A fully assembled household problem for one regime assignment.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub household: HouseholdId,
    /// Column order of the activity variables.
    pub activities: Vec<ActivityId>,
    /// Minimization form: the negated objective without `constant`.
    pub qp: QuadraticProgram,
    pub regimes: BTreeMap<ProductId, Regime>,
    pub consumption: BTreeMap<ProductId, f64>,
    pub consumption_enabled: bool,
    /// Objective terms that do not depend on decisions (ExInc, consumption value).
    pub constant: f64,
    exog_income: f64,
    yields: Vec<f64>,
    products: Vec<ProductId>,
    band: BTreeMap<ProductId, (f64, f64)>,
    market_rows: BTreeMap<ProductId, MarketRow>,
    ineq_names: Vec<String>,
    fertilizer_price: f64,
    subsidy_rate: f64,
}

impl ProblemInstance {
    pub fn n_activities(&self) -> usize {
        self.activities.len()
    }

    fn sub_col(&self) -> usize {
        self.activities.len()
    }

    fn mkt_col(&self) -> usize {
        self.activities.len() + 1
    }

    /// Feasible-looking start at the given activity levels.
    pub fn start_point(&self, levels: &BTreeMap<ActivityId, f64>) -> Vec<f64> {
        let n = self.n_activities();
        let mut z = vec![0.0; n + 2];
        let mut fert = 0.0;
        for (i, id) in self.activities.iter().enumerate() {
            z[i] = levels.get(id).copied().unwrap_or(0.0).max(0.0);
            let balance = &self.qp.equalities[0].coeffs;
            fert += balance[i] * z[i];
        }
        let sub = fert.min(self.qp.upper[n]).max(0.0);
        z[n] = sub;
        z[n + 1] = fert - sub;
        z
    }
}

fn season_key(kind: &str, season: Season) -> String {
    format!("{kind}_{}", season.as_str())
}

/// Assemble the problem for a fixed regime per product.
pub fn build_problem(
    household: &Household,
    calibration: &HouseholdCalibration,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    regimes: &BTreeMap<ProductId, Regime>,
    consumption: &BTreeMap<ProductId, f64>,
    options: &ModelOptions,
) -> Result<ProblemInstance> {
    let prices = &model.prices;
    let ids: Vec<ActivityId> = calibration.behavioral.linear.keys().cloned().collect();
    let acts: Vec<&Activity> = ids
        .iter()
        .map(|id| {
            model
                .activity(id)
                .ok_or_else(|| Error::InvalidInput(format!("unknown activity {id}")))
        })
        .collect::<Result<_>>()?;
    let n = acts.len();
    let m = n + 2;
    let (sub, mkt) = (n, n + 1);
    let pf = prices.fertilizer_market_price;
    let rate = policy.rate;

    let mut qp = QuadraticProgram::new(m);
    for i in 0..n {
        qp.lower[i] = 0.0;
    }
    qp.lower[sub] = 0.0;
    qp.upper[sub] = if policy.subsidizes(household) {
        policy.quota_kg
    } else {
        0.0
    };
    qp.lower[mkt] = 0.0;
    qp.linear[sub] = (1.0 - rate) * pf;
    qp.linear[mkt] = pf;

    for (a, ia) in ids.iter().enumerate() {
        for (b, ib) in ids.iter().enumerate() {
            qp.hessian[(a, b)] = calibration.behavioral.q(ia, ib);
        }
    }

    // Fertilizer balance.
    let mut fert = vec![0.0; m];
    for (i, act) in acts.iter().enumerate() {
        fert[i] = act.fertilizer_qty;
    }
    fert[sub] = -1.0;
    fert[mkt] = -1.0;
    qp.equalities.push(LinearConstraint::new(fert, 0.0));

    let mut ineq_names = Vec::new();
    let mut push_row = |qp: &mut QuadraticProgram, name: String, coeffs: Vec<f64>, rhs: f64| {
        if coeffs.iter().any(|v| *v != 0.0) {
            qp.inequalities.push(LinearConstraint::new(coeffs, rhs));
            ineq_names.push(name);
        }
    };
    for season in Season::ALL {
        let mut land = vec![0.0; m];
        let mut labor = vec![0.0; m];
        for (i, act) in acts.iter().enumerate() {
            if act.season == season {
                land[i] = 1.0;
                labor[i] = act.labor_req;
            }
        }
        push_row(&mut qp, season_key("land", season), land, household.land.get(season));
        push_row(&mut qp, season_key("labor", season), labor, household.labor.get(season));
    }
    let mut cash = vec![0.0; m];
    for (i, act) in acts.iter().enumerate() {
        cash[i] = act.input_costs.cash_non_fertilizer();
    }
    cash[sub] = (1.0 - rate) * pf;
    cash[mkt] = pf;
    push_row(&mut qp, "cash".to_owned(), cash, household.cash_endowment);

    // Products touched by this household.
    let mut touched: BTreeMap<ProductId, Vec<usize>> = BTreeMap::new();
    for (i, act) in acts.iter().enumerate() {
        touched.entry(act.product.clone()).or_default().push(i);
    }
    for (p, c) in consumption {
        if *c > 0.0 {
            touched.entry(p.clone()).or_default();
        }
    }

    let tradable: BTreeMap<&ProductId, bool> =
        model.products.iter().map(|p| (&p.id, p.tradable)).collect();
    let mut revenue = vec![0.0; n];
    let mut constant = household.exog_income;
    let mut market_rows = BTreeMap::new();
    let mut band = BTreeMap::new();
    for (product, cols) in &touched {
        let regime = *regimes
            .get(product)
            .ok_or_else(|| Error::InvalidInput(format!("no regime assigned for {product}")))?;
        let price = prices
            .product(product)
            .ok_or_else(|| Error::InvalidInput(format!("no price for {product}")))?;
        if regime != Regime::Autarky && !tradable.get(product).copied().unwrap_or(true) {
            return Err(Error::InvalidInput(format!(
                "{product} is not tradable but assigned regime {}",
                regime.as_str()
            )));
        }
        band.insert(product.clone(), (price.sell(), price.buy()));
        let c = consumption.get(product).copied().unwrap_or(0.0);
        constant += price.market * c;
        let mut q = vec![0.0; m];
        for &i in cols {
            q[i] = acts[i].yield_per_ha;
        }
        let row = match regime {
            Regime::Seller => {
                for &i in cols {
                    revenue[i] += price.sell() * acts[i].yield_per_ha;
                }
                constant -= price.sell() * c;
                if c > 0.0 && !cols.is_empty() {
                    qp.inequalities
                        .push(LinearConstraint::new(q.iter().map(|v| -v).collect(), -c));
                    ineq_names.push(format!("market_{product}"));
                    MarketRow::Ineq(qp.inequalities.len() - 1)
                } else if c > 0.0 {
                    return Err(Error::Infeasible(format!(
                        "{product}: seller regime without production"
                    )));
                } else {
                    MarketRow::None
                }
            }
            Regime::Buyer => {
                for &i in cols {
                    revenue[i] += price.buy() * acts[i].yield_per_ha;
                }
                constant -= price.buy() * c;
                if cols.is_empty() {
                    MarketRow::None
                } else {
                    qp.inequalities.push(LinearConstraint::new(q, c));
                    ineq_names.push(format!("market_{product}"));
                    MarketRow::Ineq(qp.inequalities.len() - 1)
                }
            }
            Regime::Autarky => {
                if cols.is_empty() {
                    if c > 0.0 {
                        return Err(Error::Infeasible(format!(
                            "{product}: autarky with consumption {c} and no production"
                        )));
                    }
                    MarketRow::None
                } else {
                    qp.equalities.push(LinearConstraint::new(q, c));
                    MarketRow::Eq(qp.equalities.len() - 1)
                }
            }
        };
        market_rows.insert(product.clone(), row);
    }

    for (i, act) in acts.iter().enumerate() {
        let id = &ids[i];
        let margin = revenue[i] + act.production_subsidy - act.input_costs.non_fertilizer()
            + calibration.margin_shift.get(id).copied().unwrap_or(0.0)
            - calibration.behavioral.d(id);
        qp.linear[i] = -margin;
    }

    Ok(ProblemInstance {
        household: household.id.clone(),
        yields: acts.iter().map(|a| a.yield_per_ha).collect(),
        products: acts.iter().map(|a| a.product.clone()).collect(),
        activities: ids,
        qp,
        regimes: regimes
            .iter()
            .filter(|(p, _)| touched.contains_key(*p))
            .map(|(p, r)| (p.clone(), *r))
            .collect(),
        consumption: touched
            .keys()
            .map(|p| (p.clone(), consumption.get(p).copied().unwrap_or(0.0)))
            .collect(),
        consumption_enabled: options.consumption_enabled,
        constant,
        exog_income: household.exog_income,
        band,
        market_rows,
        ineq_names,
        fertilizer_price: pf,
        subsidy_rate: rate,
    })
}

/// Solve an assembled instance and decode the solution.
pub fn solve_qp(
    instance: &ProblemInstance,
    warm: Option<WarmStart>,
) -> Result<(Solution, KktReport)> {
    let sol = qp::solve(
        &instance.qp,
        &SolveOptions {
            warm_start: warm,
            ..Default::default()
        },
    )?;
    let n = instance.n_activities();
    let x: Vec<f64> = sol.x[..n].iter().map(|v| v.max(0.0)).collect();

    let mut out = Solution {
        household: instance.household.clone(),
        ..Default::default()
    };
    for (i, id) in instance.activities.iter().enumerate() {
        out.levels.insert(id.clone(), x[i]);
    }
    let mut production: BTreeMap<ProductId, f64> = BTreeMap::new();
    for (i, p) in instance.products.iter().enumerate() {
        *production.entry(p.clone()).or_default() += instance.yields[i] * x[i];
    }
    for (product, regime) in &instance.regimes {
        let q = production.get(product).copied().unwrap_or(0.0);
        let c = instance.consumption.get(product).copied().unwrap_or(0.0);
        let (sell, buy) = instance.band[product];
        let row = instance.market_rows[product];
        let (sales, purchases, self_consumed, internal) = match regime {
            Regime::Seller => {
                let lambda = match row {
                    MarketRow::Ineq(k) => sol.ineq_duals[k],
                    _ => 0.0,
                };
                ((q - c).max(0.0), 0.0, c, sell + lambda)
            }
            Regime::Buyer => {
                let lambda = match row {
                    MarketRow::Ineq(k) => sol.ineq_duals[k],
                    _ => 0.0,
                };
                (0.0, (c - q).max(0.0), q.min(c), buy - lambda)
            }
            Regime::Autarky => {
                let nu = match row {
                    MarketRow::Eq(k) => sol.eq_duals[k],
                    _ => 0.0,
                };
                let internal = if matches!(row, MarketRow::Eq(_)) {
                    -nu
                } else {
                    0.5 * (sell + buy)
                };
                (0.0, 0.0, c, internal)
            }
        };
        // No net trade at an optimum of the seller or buyer program is autarky.
        let regime = if c > 0.0 && (q - c).abs() <= 1e-9 * c.max(1.0) {
            Regime::Autarky
        } else {
            *regime
        };
        let (sales, purchases) = if regime == Regime::Autarky { (0.0, 0.0) } else { (sales, purchases) };
        out.production.insert(product.clone(), q);
        out.sales.insert(product.clone(), sales);
        out.purchases.insert(product.clone(), purchases);
        out.self_consumed.insert(product.clone(), self_consumed);
        out.consumed.insert(product.clone(), c);
        out.internal_price.insert(product.clone(), internal);
        out.regime.insert(product.clone(), regime);
    }
    out.fertilizer_subsidized_kg = sol.x[instance.sub_col()].max(0.0);
    out.fertilizer_unsubsidized_kg = sol.x[instance.mkt_col()].max(0.0);
    for (k, name) in instance.ineq_names.iter().enumerate() {
        if !name.starts_with("market_") {
            out.duals.insert(name.clone(), sol.ineq_duals[k]);
        }
    }
    if instance.qp.upper[instance.sub_col()] > 0.0 {
        out.duals
            .insert("quota".to_owned(), sol.upper_duals[instance.sub_col()]);
    }
    out.total_income = instance.constant - sol.objective;
    out.farm_income = out.total_income - instance.exog_income;
    out.subsidy_outlay =
        instance.subsidy_rate * instance.fertilizer_price * out.fertilizer_subsidized_kg;
    out.kkt = sol.kkt;
    Ok((out, sol.kkt))
}

/// Regime choices for each product the household touches.
fn regime_candidates(
    household: &Household,
    calibration: &HouseholdCalibration,
    model: &ModelInstance,
    consumption: &BTreeMap<ProductId, f64>,
) -> Result<BTreeMap<ProductId, Vec<Regime>>> {
    let mut produced: BTreeMap<ProductId, bool> = BTreeMap::new();
    for id in calibration.behavioral.linear.keys() {
        let act = model
            .activity(id)
            .ok_or_else(|| Error::InvalidInput(format!("unknown activity {id}")))?;
        produced.insert(act.product.clone(), true);
    }
    for (p, c) in consumption {
        if *c > 0.0 {
            produced.entry(p.clone()).or_insert(false);
        }
    }
    let mut out = BTreeMap::new();
    for (product, has_activity) in produced {
        let tradable = model
            .products
            .iter()
            .find(|p| p.id == product)
            .map(|p| p.tradable)
            .unwrap_or(true);
        let c = consumption.get(&product).copied().unwrap_or(0.0);
        let choices = if !tradable {
            vec![Regime::Autarky]
        } else if !has_activity {
            vec![Regime::Buyer]
        } else if c <= 0.0 {
            vec![Regime::Seller]
        } else {
            vec![Regime::Autarky, Regime::Seller, Regime::Buyer]
        };
        out.insert(product, choices);
    }
    let _ = household;
    Ok(out)
}

/// Market position implied by observed production and consumption.
pub fn base_regimes(
    household: &Household,
    model: &ModelInstance,
    consumption: &BTreeMap<ProductId, f64>,
) -> BTreeMap<ProductId, Regime> {
    let mut q: BTreeMap<ProductId, f64> = BTreeMap::new();
    for (id, level) in &household.observed_levels {
        if let Some(act) = model.activity(id) {
            *q.entry(act.product.clone()).or_default() += act.yield_per_ha * level;
        }
    }
    for (p, c) in consumption {
        if *c > 0.0 {
            q.entry(p.clone()).or_default();
        }
    }
    q.into_iter()
        .map(|(p, q)| {
            let c = consumption.get(&p).copied().unwrap_or(0.0);
            let tradable = model
                .products
                .iter()
                .find(|x| x.id == p)
                .map(|x| x.tradable)
                .unwrap_or(true);
            let regime = if !tradable || (q - c).abs() <= 1e-9 * c.max(1.0) {
                Regime::Autarky
            } else if q > c {
                Regime::Seller
            } else {
                Regime::Buyer
            };
            (p, regime)
        })
        .collect()
}

fn better(candidate: &Solution, incumbent: &Solution) -> bool {
    let tol = 1e-9 * incumbent.total_income.abs().max(1.0);
    candidate.total_income > incumbent.total_income + tol
}

fn solve_with_consumption(
    household: &Household,
    calibration: &HouseholdCalibration,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    consumption: &BTreeMap<ProductId, f64>,
    options: &ModelOptions,
) -> Result<Solution> {
    let candidates = regime_candidates(household, calibration, model, consumption)?;
    let warm_levels = &household.observed_levels;
    let attempt = |regimes: &BTreeMap<ProductId, Regime>| -> Result<Solution> {
        let inst = build_problem(
            household,
            calibration,
            model,
            policy,
            regimes,
            consumption,
            options,
        )?;
        let start = inst.start_point(warm_levels);
        let warm = WarmStart {
            active: (0..inst.qp.inequalities.len()).collect(),
            point: start,
        };
        solve_qp(&inst, Some(warm)).map(|(s, _)| s)
    };

    let free: Vec<&ProductId> = candidates
        .iter()
        .filter(|(_, c)| c.len() > 1)
        .map(|(p, _)| p)
        .collect();
    let fixed: BTreeMap<ProductId, Regime> = candidates
        .iter()
        .map(|(p, c)| (p.clone(), c[0]))
        .collect();

    let mut best: Option<Solution> = None;
    let mut last_err: Option<Error> = None;
    let mut consider = |result: Result<Solution>, best: &mut Option<Solution>| match result {
        Ok(sol) => {
            if best.as_ref().is_none_or(|b| better(&sol, b)) {
                *best = Some(sol);
            }
        }
        Err(e @ (Error::Infeasible(_) | Error::Unbounded | Error::IterationLimit(_))) => {
            last_err = Some(e)
        }
        Err(e) => last_err = Some(e),
    };

    // The observed market position goes first so that it wins ties.
    let mut preferred = fixed.clone();
    let observed = base_regimes(household, model, consumption);
    for p in &free {
        if let Some(r) = observed.get(*p).filter(|r| candidates[*p].contains(r)) {
            preferred.insert((*p).clone(), *r);
        }
    }
    if free.len() <= options.max_enumerated {
        consider(attempt(&preferred), &mut best);
        let total = 3usize.pow(free.len() as u32);
        for code in 0..total {
            let mut regimes = fixed.clone();
            let mut rest = code;
            // Most significant digit first: the first product varies slowest.
            let mut digits = vec![0usize; free.len()];
            for d in digits.iter_mut().rev() {
                *d = rest % 3;
                rest /= 3;
            }
            for (p, d) in free.iter().zip(digits) {
                regimes.insert((*p).clone(), candidates[*p][d]);
            }
            if regimes != preferred {
                consider(attempt(&regimes), &mut best);
            }
        }
    } else {
        let mut current = preferred;
        consider(attempt(&current), &mut best);
        loop {
            let mut improved = false;
            for p in &free {
                for r in &candidates[*p] {
                    if current[*p] == *r {
                        continue;
                    }
                    let mut trial = current.clone();
                    trial.insert((*p).clone(), *r);
                    match attempt(&trial) {
                        Ok(sol) => {
                            if best.as_ref().is_none_or(|b| better(&sol, b)) {
                                best = Some(sol);
                                current = trial;
                                improved = true;
                            }
                        }
                        Err(e) => last_err = Some(e),
                    }
                }
            }
            if !improved {
                break;
            }
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::Infeasible("no feasible regime assignment".into()))
    })
}

/// Solve the household problem, choosing the best market regime per product.
pub fn solve_household(
    household: &Household,
    calibration: &HouseholdCalibration,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    options: &ModelOptions,
) -> Result<Solution> {
    if !options.consumption_enabled {
        return solve_with_consumption(
            household,
            calibration,
            model,
            policy,
            &household.observed_consumption,
            options,
        );
    }
    let les = calibration.les.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!(
            "household {}: consumption enabled without demand parameters",
            household.id
        ))
    })?;
    let mut consumption = household.observed_consumption.clone();
    let mut last = None;
    for _ in 0..100 {
        let sol = solve_with_consumption(household, calibration, model, policy, &consumption, options)?;
        let budget = les.budget_share * sol.total_income;
        let price_of = |p: &ProductId| -> f64 {
            sol.internal_price.get(p).copied().unwrap_or_else(|| {
                model.prices.product(p).map(|x| x.buy()).unwrap_or(0.0)
            })
        };
        let committed: f64 = les.gamma.iter().map(|(p, g)| g * price_of(p)).sum();
        let supernumerary = (budget - committed).max(0.0);
        let mut change = 0.0f64;
        let mut next = consumption.clone();
        for (p, beta) in &les.beta {
            let price = price_of(p);
            let gamma = les.gamma.get(p).copied().unwrap_or(0.0);
            let target = if price > 0.0 {
                gamma + beta * supernumerary / price
            } else {
                gamma
            };
            let old = consumption.get(p).copied().unwrap_or(0.0);
            change = change.max((target - old).abs() / old.abs().max(1.0));
            next.insert(p.clone(), old + 0.5 * (target - old));
        }
        last = Some(sol);
        if change <= 1e-7 {
            break;
        }
        consumption = next;
    }
    last.ok_or_else(|| Error::IterationLimit(100))
}

/// Solve every household independently; failures become diagnostics.
pub fn solve_all(
    households: &[Household],
    calibrations: &BTreeMap<HouseholdId, HouseholdCalibration>,
    model: &ModelInstance,
    policy: &SubsidyPolicy,
    options: &ModelOptions,
) -> (BTreeMap<HouseholdId, Solution>, Vec<Diagnostic>) {
    let results: Vec<(HouseholdId, Result<Solution>)> = households
        .par_iter()
        .map(|h| {
            let res = match calibrations.get(&h.id) {
                Some(cal) => solve_household(h, cal, model, policy, options),
                None => Err(Error::InvalidInput("no calibration".into())),
            };
            (h.id.clone(), res)
        })
        .collect();
    let mut solutions = BTreeMap::new();
    let mut diagnostics = Vec::new();
    for (id, res) in results {
        match res {
            Ok(sol) => {
                solutions.insert(id, sol);
            }
            Err(e) => diagnostics.push(Diagnostic::new(format!("household {id}"), e.to_string())),
        }
    }
    diagnostics.sort();
    (solutions, diagnostics)
}

/// Check market complementarity, product balances and price bands.
///
/// Returns the list of violated conditions; empty when all hold to `tol`
/// (relative to the magnitude of the quantities compared).
pub fn verify_solution(solution: &Solution, model: &ModelInstance, tol: f64) -> Vec<String> {
    let mut issues = Vec::new();
    for (p, q) in &solution.production {
        let s = solution.sales.get(p).copied().unwrap_or(0.0);
        let b = solution.purchases.get(p).copied().unwrap_or(0.0);
        let c = solution.consumed.get(p).copied().unwrap_or(0.0);
        let cs = solution.self_consumed.get(p).copied().unwrap_or(0.0);
        let scale = q.abs().max(c.abs()).max(1.0);
        if s * b > tol * scale * scale {
            issues.push(format!("{p}: simultaneous sales {s} and purchases {b}"));
        }
        if (q + b - s - c).abs() > tol * scale {
            issues.push(format!("{p}: product balance off by {}", q + b - s - c));
        }
        if (c - cs - b).abs() > tol * scale {
            issues.push(format!("{p}: consumption balance off by {}", c - cs - b));
        }
        if s < -tol * scale || b < -tol * scale || cs < -tol * scale {
            issues.push(format!("{p}: negative market quantity"));
        }
        if let (Some(ph), Some(price)) = (solution.internal_price.get(p), model.prices.product(p)) {
            let (lo, hi) = (price.sell(), price.buy());
            let slack = tol * hi.abs().max(1.0);
            if *ph < lo - slack || *ph > hi + slack {
                issues.push(format!("{p}: internal price {ph} outside [{lo}, {hi}]"));
            }
        }
    }
    if solution.kkt.max() > tol {
        issues.push(format!("kkt residual {:e}", solution.kkt.max()));
    }
    issues
}
