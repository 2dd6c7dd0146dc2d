//! Dense primal active-set solver for small convex quadratic programs.
//!
//! Solves
//!
//! ```text
//!     minimize    1/2 z' H z + g' z
//!     subject to  A_eq z  = b_eq
//!                 A_in z <= b_in
//!                 lo <= z <= hi
//! ```
//!
//! with `H` symmetric positive semidefinite. Zero-curvature directions are
//! followed to the nearest blocking constraint, so linear programs (`H = 0`)
//! and problems with linear auxiliary variables are handled by the same
//! iteration. Variable bounds are kept out of the working-set matrix: a
//! variable at a bound is simply removed from the free subspace.
//!
//! A feasible start is found with a phase-one linear program that minimizes
//! the largest constraint violation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::types::KktReport;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearConstraint {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

impl LinearConstraint {
    pub fn new(coeffs: Vec<f64>, rhs: f64) -> Self {
        LinearConstraint { coeffs, rhs }
    }

    fn dot(&self, z: &[f64]) -> f64 {
        self.coeffs.iter().zip(z).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProgram {
    pub hessian: DMatrix<f64>,
    pub linear: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub equalities: Vec<LinearConstraint>,
    pub inequalities: Vec<LinearConstraint>,
}

impl QuadraticProgram {
    /// An unconstrained zero objective over `n` variables.
    pub fn new(n: usize) -> Self {
        QuadraticProgram {
            hessian: DMatrix::zeros(n, n),
            linear: vec![0.0; n],
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
            equalities: Vec::new(),
            inequalities: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn objective(&self, z: &[f64]) -> f64 {
        let n = self.dim();
        let mut val = 0.0;
        for i in 0..n {
            val += self.linear[i] * z[i];
            for j in 0..n {
                val += 0.5 * z[i] * self.hessian[(i, j)] * z[j];
            }
        }
        val
    }

    fn check_dims(&self) -> Result<()> {
        let n = self.dim();
        let ok = self.hessian.nrows() == n
            && self.hessian.ncols() == n
            && self.lower.len() == n
            && self.upper.len() == n
            && self
                .equalities
                .iter()
                .chain(&self.inequalities)
                .all(|c| c.coeffs.len() == n);
        if !ok {
            return Err(Error::InvalidInput("inconsistent QP dimensions".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::Infeasible("variable lower bound above upper bound".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WarmStart {
    pub point: Vec<f64>,
    /// Indices of inequalities believed active at `point`.
    pub active: Vec<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct SolveOptions {
    pub max_iterations: Option<usize>,
    pub warm_start: Option<WarmStart>,
}

/// Optimizer and multipliers of a solved program.
///
/// Multipliers follow the Lagrangian
/// `H z + g + A_eq' nu + A_in' lambda - mu_lo + mu_hi = 0` with
/// `lambda, mu_lo, mu_hi >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub eq_duals: Vec<f64>,
    pub ineq_duals: Vec<f64>,
    pub lower_duals: Vec<f64>,
    pub upper_duals: Vec<f64>,
    /// Inequalities in the final working set.
    pub active: Vec<usize>,
    pub iterations: usize,
    pub kkt: KktReport,
}

impl QpSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            point: self.x.clone(),
            active: self.active.clone(),
        }
    }
}

const FEAS_TOL: f64 = 1e-9;
const STEP_TOL: f64 = 1e-12;
const MULT_TOL: f64 = 1e-10;
const CURV_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VarState {
    Free,
    Lower,
    Upper,
    Fixed,
}

/// Row-scaled copy of a program; the objective is scaled to unit magnitude.
struct Scaled {
    n: usize,
    h: DMatrix<f64>,
    g: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    eq: Vec<LinearConstraint>,
    ineq: Vec<LinearConstraint>,
    eq_scale: Vec<f64>,
    ineq_scale: Vec<f64>,
    /// Rows with no coefficients, kept only so indices line up.
    eq_void: Vec<bool>,
    ineq_void: Vec<bool>,
    obj_scale: f64,
}

impl Scaled {
    fn new(qp: &QuadraticProgram) -> Result<Scaled> {
        let n = qp.dim();
        let hmax = qp.hessian.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gmax = qp.linear.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mag = hmax.max(gmax);
        let obj_scale = if mag > 0.0 { 1.0 / mag } else { 1.0 };

        fn scale_rows(
            rows: &[LinearConstraint],
            equality: bool,
        ) -> Result<(Vec<LinearConstraint>, Vec<f64>, Vec<bool>)> {
            let mut out = Vec::with_capacity(rows.len());
            let mut scales = Vec::with_capacity(rows.len());
            let mut void = Vec::with_capacity(rows.len());
            for r in rows {
                let norm = r.coeffs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if norm == 0.0 {
                    let violated = if equality {
                        r.rhs.abs() > FEAS_TOL
                    } else {
                        r.rhs < -FEAS_TOL
                    };
                    if violated {
                        return Err(Error::Infeasible("constant constraint violated".into()));
                    }
                    out.push(r.clone());
                    scales.push(1.0);
                    void.push(true);
                } else {
                    out.push(LinearConstraint {
                        coeffs: r.coeffs.iter().map(|v| v / norm).collect(),
                        rhs: r.rhs / norm,
                    });
                    scales.push(norm);
                    void.push(false);
                }
            }
            Ok((out, scales, void))
        }

        let (eq, eq_scale, eq_void) = scale_rows(&qp.equalities, true)?;
        let (ineq, ineq_scale, ineq_void) = scale_rows(&qp.inequalities, false)?;
        Ok(Scaled {
            n,
            h: &qp.hessian * obj_scale,
            g: qp.linear.iter().map(|v| v * obj_scale).collect(),
            lo: qp.lower.clone(),
            hi: qp.upper.clone(),
            eq,
            ineq,
            eq_scale,
            ineq_scale,
            eq_void,
            ineq_void,
            obj_scale,
        })
    }

    fn max_violation(&self, z: &[f64]) -> f64 {
        let mut v = 0.0f64;
        for (r, void) in self.eq.iter().zip(&self.eq_void) {
            if !void {
                v = v.max((r.dot(z) - r.rhs).abs());
            }
        }
        for (r, void) in self.ineq.iter().zip(&self.ineq_void) {
            if !void {
                v = v.max(r.dot(z) - r.rhs);
            }
        }
        for j in 0..self.n {
            v = v.max(self.lo[j] - z[j]).max(z[j] - self.hi[j]);
        }
        v
    }
}

/// Output of the core iteration, in scaled units.
struct CoreResult {
    z: Vec<f64>,
    state: Vec<VarState>,
    active: Vec<usize>,
    eq_mult: Vec<f64>,
    ineq_mult: Vec<f64>,
    bound_mult: Vec<f64>,
    iterations: usize,
}

/// Active-set iteration from a feasible `z`.
fn active_set(
    p: &Scaled,
    mut z: Vec<f64>,
    mut active: Vec<usize>,
    max_iter: usize,
) -> Result<CoreResult> {
    let n = p.n;
    let mut state: Vec<VarState> = (0..n)
        .map(|j| {
            if p.lo[j] == p.hi[j] {
                VarState::Fixed
            } else if z[j] <= p.lo[j] {
                VarState::Lower
            } else if z[j] >= p.hi[j] {
                VarState::Upper
            } else {
                VarState::Free
            }
        })
        .collect();
    for j in 0..n {
        match state[j] {
            VarState::Lower | VarState::Fixed => z[j] = p.lo[j],
            VarState::Upper => z[j] = p.hi[j],
            VarState::Free => {}
        }
    }
    active.retain(|&i| !p.ineq_void[i]);
    active.sort_unstable();
    active.dedup();

    let mut degenerate_steps = 0usize;
    let bland_after = 2 * (n + p.ineq.len()) + 10;
    // Set after an unblocked Newton step: the point already minimizes over the
    // working subspace, and with an ill-conditioned reduced Hessian the next
    // step would be round-off that never drops below the step tolerance.
    let mut on_minimizer = false;

    for iter in 0..max_iter {
        let free: Vec<usize> = (0..n).filter(|&j| state[j] == VarState::Free).collect();
        let nf = free.len();
        let rows: Vec<&LinearConstraint> = p
            .eq
            .iter()
            .zip(&p.eq_void)
            .filter(|(_, v)| !**v)
            .map(|(r, _)| r)
            .chain(active.iter().map(|&i| &p.ineq[i]))
            .collect();
        let k = rows.len();

        let mut grad = vec![0.0; n];
        for i in 0..n {
            let mut s = p.g[i];
            for j in 0..n {
                s += p.h[(i, j)] * z[j];
            }
            grad[i] = s;
        }

        let a_free = DMatrix::from_fn(k, nf, |r, c| rows[r].coeffs[free[c]]);
        let null = null_space(&a_free);
        let r = null.ncols();

        let mut dir_free = DVector::zeros(nf);
        let mut is_ray = false;
        if r > 0 {
            let h_free = DMatrix::from_fn(nf, nf, |a, b| p.h[(free[a], free[b])]);
            let g_free = DVector::from_fn(nf, |a, _| grad[free[a]]);
            let hr = null.transpose() * &h_free * &null;
            let gr = null.transpose() * &g_free;
            let eig = SymmetricEigen::new(hr);
            let emax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let curv_tol = CURV_TOL * emax.max(1.0);
            let mut kernel = DVector::zeros(r);
            let mut newton = DVector::zeros(r);
            for (idx, &lam) in eig.eigenvalues.iter().enumerate() {
                let u = eig.eigenvectors.column(idx);
                let coef = u.dot(&gr);
                if lam < -1e-7 * emax.max(1.0) {
                    return Err(Error::NotConvex(lam));
                }
                if lam <= curv_tol {
                    kernel += u * coef;
                } else {
                    newton += u * (coef / lam);
                }
            }
            if kernel.amax() > GRAD_TOL {
                is_ray = true;
                dir_free = -(&null * kernel);
            } else {
                dir_free = -(&null * newton);
            }
        }

        let znorm = z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        if !is_ray && (on_minimizer || dir_free.amax() <= STEP_TOL * znorm) {
            on_minimizer = false;
            // Stationary on the working subspace: inspect multipliers.
            let (mult, bound_mult) = multipliers(p, &rows, &free, &grad, &state);
            let n_eq = k - active.len();
            let mut worst: Option<(usize, f64)> = None; // candidate index into (active ++ bounds)
            let bland = degenerate_steps > bland_after;
            let candidates = active
                .iter()
                .enumerate()
                .map(|(pos, _)| (pos, mult[n_eq + pos]))
                .chain((0..n).filter_map(|j| match state[j] {
                    VarState::Lower | VarState::Upper => Some((active.len() + j, bound_mult[j])),
                    _ => None,
                }));
            for (cand, value) in candidates {
                if value < -MULT_TOL {
                    match worst {
                        None => worst = Some((cand, value)),
                        Some((_, w)) if !bland && value < w => worst = Some((cand, value)),
                        _ => {}
                    }
                }
            }
            match worst {
                None => {
                    let mut eq_mult = vec![0.0; p.eq.len()];
                    let mut pos = 0;
                    for (i, void) in p.eq_void.iter().enumerate() {
                        if !void {
                            eq_mult[i] = mult[pos];
                            pos += 1;
                        }
                    }
                    let mut ineq_mult = vec![0.0; p.ineq.len()];
                    for (pos, &i) in active.iter().enumerate() {
                        ineq_mult[i] = mult[n_eq + pos].max(0.0);
                    }
                    return Ok(CoreResult {
                        z,
                        state,
                        active,
                        eq_mult,
                        ineq_mult,
                        bound_mult: bound_mult.into_iter().map(|v| v.max(0.0)).collect(),
                        iterations: iter,
                    });
                }
                Some((cand, _)) => {
                    if cand < active.len() {
                        active.remove(cand);
                    } else {
                        state[cand - active.len()] = VarState::Free;
                    }
                    continue;
                }
            }
        }

        // Expand the free-space direction into the full space.
        let mut dir = vec![0.0; n];
        for (c, &j) in free.iter().enumerate() {
            dir[j] = dir_free[c];
        }
        let dnorm = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut alpha = if is_ray { f64::INFINITY } else { 1.0 };
        enum Block {
            Row(usize),
            Lo(usize),
            Hi(usize),
        }
        let mut block: Option<Block> = None;
        for (i, row) in p.ineq.iter().enumerate() {
            if p.ineq_void[i] || active.binary_search(&i).is_ok() {
                continue;
            }
            let ap = row.dot(&dir);
            if ap > 1e-12 * dnorm {
                let slack = (row.rhs - row.dot(&z)).max(0.0);
                let t = slack / ap;
                if t < alpha {
                    alpha = t;
                    block = Some(Block::Row(i));
                }
            }
        }
        for &j in &free {
            let d = dir[j];
            if d < -1e-12 * dnorm && p.lo[j].is_finite() {
                let t = (z[j] - p.lo[j]).max(0.0) / -d;
                if t < alpha {
                    alpha = t;
                    block = Some(Block::Lo(j));
                }
            } else if d > 1e-12 * dnorm && p.hi[j].is_finite() {
                let t = (p.hi[j] - z[j]).max(0.0) / d;
                if t < alpha {
                    alpha = t;
                    block = Some(Block::Hi(j));
                }
            }
        }
        if alpha.is_infinite() {
            return Err(Error::Unbounded);
        }
        if alpha <= 0.0 {
            degenerate_steps += 1;
        } else {
            degenerate_steps = 0;
        }
        for j in 0..n {
            z[j] += alpha * dir[j];
        }
        on_minimizer = !is_ray && block.is_none();
        match block {
            Some(Block::Row(i)) => {
                let pos = active.binary_search(&i).unwrap_err();
                active.insert(pos, i);
            }
            Some(Block::Lo(j)) => {
                state[j] = VarState::Lower;
                z[j] = p.lo[j];
            }
            Some(Block::Hi(j)) => {
                state[j] = VarState::Upper;
                z[j] = p.hi[j];
            }
            None => {}
        }
    }
    Err(Error::IterationLimit(max_iter))
}

/// Least-squares multipliers of the working rows plus reduced costs of the
/// variables held at bounds.
fn multipliers(
    p: &Scaled,
    rows: &[&LinearConstraint],
    free: &[usize],
    grad: &[f64],
    state: &[VarState],
) -> (Vec<f64>, Vec<f64>) {
    let k = rows.len();
    let nf = free.len();
    let mult = if k == 0 {
        Vec::new()
    } else if nf == 0 {
        vec![0.0; k]
    } else {
        let at = DMatrix::from_fn(nf, k, |r, c| rows[c].coeffs[free[r]]);
        let rhs = DVector::from_fn(nf, |r, _| -grad[free[r]]);
        let svd = at.svd(true, true);
        let smax = svd.singular_values.iter().fold(0.0f64, |m, v| m.max(*v));
        match svd.solve(&rhs, 1e-12 * smax.max(1.0)) {
            Ok(sol) => sol.iter().copied().collect(),
            Err(_) => vec![0.0; k],
        }
    };
    let mut bound = vec![0.0; p.n];
    for j in 0..p.n {
        if state[j] == VarState::Free {
            continue;
        }
        let mut rc = grad[j];
        for (row, m) in rows.iter().zip(&mult) {
            rc += m * row.coeffs[j];
        }
        bound[j] = match state[j] {
            VarState::Lower | VarState::Fixed => rc,
            VarState::Upper => -rc,
            VarState::Free => 0.0,
        };
        if state[j] == VarState::Fixed {
            // Sign-free multiplier of an equality bound; never a drop candidate.
            bound[j] = 0.0;
        }
    }
    (mult, bound)
}

/// Orthonormal basis of the null space of `a` (k x n), as an n x r matrix.
fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    if a.nrows() == 0 || n == 0 {
        return DMatrix::identity(n, n);
    }
    let gram = a.transpose() * a;
    let eig = SymmetricEigen::new(gram);
    let emax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    let tol = 1e-10 * emax.max(1.0);
    let cols: Vec<usize> = (0..n).filter(|&i| eig.eigenvalues[i] <= tol).collect();
    DMatrix::from_fn(n, cols.len(), |r, c| eig.eigenvectors[(r, cols[c])])
}

/// Find a feasible point by minimizing the largest violation.
fn phase_one(p: &Scaled, start: &[f64], max_iter: usize) -> Result<Vec<f64>> {
    let n = p.n;
    let m = n + 1;
    let tau = n;
    let mut lp = QuadraticProgram::new(m);
    lp.linear[tau] = 1.0;
    for j in 0..n {
        lp.lower[j] = p.lo[j];
        lp.upper[j] = p.hi[j];
    }
    lp.lower[tau] = 0.0;
    let with_tau = |coeffs: &[f64], sign: f64| {
        let mut c: Vec<f64> = coeffs.iter().map(|v| v * sign).collect();
        c.push(-1.0);
        c
    };
    for (r, void) in p.eq.iter().zip(&p.eq_void) {
        if *void {
            continue;
        }
        lp.inequalities.push(LinearConstraint::new(with_tau(&r.coeffs, 1.0), r.rhs));
        lp.inequalities.push(LinearConstraint::new(with_tau(&r.coeffs, -1.0), -r.rhs));
    }
    for (r, void) in p.ineq.iter().zip(&p.ineq_void) {
        if !void {
            lp.inequalities.push(LinearConstraint::new(with_tau(&r.coeffs, 1.0), r.rhs));
        }
    }
    let mut z0: Vec<f64> = start.to_vec();
    let violation = p.max_violation(&z0).max(0.0);
    z0.push(violation);
    let scaled = Scaled::new(&lp)?;
    let res = active_set(&scaled, z0, Vec::new(), max_iter)?;
    if res.z[tau] > FEAS_TOL {
        return Err(Error::Infeasible(format!(
            "smallest achievable constraint violation {:.3e}",
            res.z[tau]
        )));
    }
    Ok(res.z[..n].to_vec())
}

/// Solve a convex QP.
pub fn solve(qp: &QuadraticProgram, options: &SolveOptions) -> Result<QpSolution> {
    qp.check_dims()?;
    let n = qp.dim();
    let p = Scaled::new(qp)?;
    let max_iter = options
        .max_iterations
        .unwrap_or(50 * (n + qp.inequalities.len() + qp.equalities.len()) + 200);

    let (start, active) = match &options.warm_start {
        Some(ws) if ws.point.len() == n => (ws.point.clone(), ws.active.clone()),
        _ => (vec![0.0; n], Vec::new()),
    };
    let mut start: Vec<f64> = start
        .iter()
        .enumerate()
        .map(|(j, v)| v.clamp(p.lo[j], p.hi[j]))
        .map(|v| if v.is_finite() { v } else { 0.0 })
        .collect();
    let mut active: Vec<usize> = active
        .into_iter()
        .filter(|&i| i < p.ineq.len())
        .filter(|&i| (p.ineq[i].dot(&start) - p.ineq[i].rhs).abs() <= FEAS_TOL)
        .collect();

    let mut iterations = 0;
    if p.max_violation(&start) > FEAS_TOL {
        start = phase_one(&p, &start, max_iter)?;
        active.clear();
        iterations += 1;
    }
    let res = active_set(&p, start, active, max_iter)?;
    iterations += res.iterations;

    // Unscale multipliers: original = scaled / (obj_scale * row_scale).
    let eq_duals: Vec<f64> = res
        .eq_mult
        .iter()
        .zip(&p.eq_scale)
        .map(|(m, s)| m / (p.obj_scale * s))
        .collect();
    let ineq_duals: Vec<f64> = res
        .ineq_mult
        .iter()
        .zip(&p.ineq_scale)
        .map(|(m, s)| m / (p.obj_scale * s))
        .collect();
    let mut lower_duals = vec![0.0; n];
    let mut upper_duals = vec![0.0; n];
    for j in 0..n {
        match res.state[j] {
            VarState::Lower => lower_duals[j] = res.bound_mult[j] / p.obj_scale,
            VarState::Upper => upper_duals[j] = res.bound_mult[j] / p.obj_scale,
            _ => {}
        }
    }

    let kkt = kkt_report(&p, &res);
    Ok(QpSolution {
        objective: qp.objective(&res.z),
        x: res.z,
        eq_duals,
        ineq_duals,
        lower_duals,
        upper_duals,
        active: res.active,
        iterations,
        kkt,
    })
}

fn kkt_report(p: &Scaled, res: &CoreResult) -> KktReport {
    let n = p.n;
    let z = &res.z;
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let mut s = p.g[i];
        for j in 0..n {
            s += p.h[(i, j)] * z[j];
        }
        resid[i] = s;
    }
    for (r, m) in p.eq.iter().zip(&res.eq_mult) {
        for j in 0..n {
            resid[j] += m * r.coeffs[j];
        }
    }
    for (r, m) in p.ineq.iter().zip(&res.ineq_mult) {
        for j in 0..n {
            resid[j] += m * r.coeffs[j];
        }
    }
    let mut comp = 0.0f64;
    for j in 0..n {
        match res.state[j] {
            VarState::Lower => {
                resid[j] -= res.bound_mult[j];
                comp = comp.max((res.bound_mult[j] * (z[j] - p.lo[j])).abs());
            }
            VarState::Upper => {
                resid[j] += res.bound_mult[j];
                comp = comp.max((res.bound_mult[j] * (p.hi[j] - z[j])).abs());
            }
            // Fixed variables carry a free multiplier equal to the residual.
            VarState::Fixed => resid[j] = 0.0,
            VarState::Free => {}
        }
    }
    for (r, m) in p.ineq.iter().zip(&res.ineq_mult) {
        comp = comp.max((m * (r.rhs - r.dot(z))).abs());
    }
    KktReport {
        stationarity: resid.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        primal_feasibility: p.max_violation(z).max(0.0),
        complementarity: comp,
    }
}
