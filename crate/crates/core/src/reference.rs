//! Centralized interior-point solution of the valley-filling QP, used as
//! the ground truth that the distributed iterates are compared against.
//!
//! Variables are `[𝒞; z]` with `z = P_b + Σ P̄_i c_i` so that the quadratic
//! term stays diagonal and the problem remains sparse.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, SupportedConeT, ZeroConeT,
};

use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::problem::ValleyFillingProblem;

/// Extra separable quadratic `½ c_iᵀ diag(q) c_i` added to one agent's cost.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagQuadratic {
    pub agent: usize,
    pub diag: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ReferenceOptions {
    pub tol: f64,
    pub max_iter: u32,
    pub extra: Vec<DiagQuadratic>,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KktReport {
    /// `‖𝒞 − Π_ℂ(𝒞 − ∇_𝒞𝓛)‖`
    pub stationarity: f64,
    /// `max |μ_k·(𝒴_b − Σ𝒟c)_k|`
    pub complementarity: f64,
    /// Largest coupling or local-set violation.
    pub primal_violation: f64,
    /// Most negative multiplier magnitude.
    pub dual_violation: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.complementarity)
            .max(self.primal_violation)
            .max(self.dual_violation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub c: Vec<f64>,
    pub mu: Vec<f64>,
    pub lambda: Vec<f64>,
    pub objective: f64,
    pub kkt: KktReport,
}

/// Distance problem: `min ½‖𝒞 − target‖²` over the feasible region with the
/// aggregate optionally pinned to `P_b + Σ P̄_i c_i = aggregate`.
#[derive(Debug, Clone)]
pub struct ProjectionQuery<'a> {
    pub target: &'a [f64],
    pub aggregate: Option<&'a [f64]>,
}

pub fn reference_solve(prob: &ValleyFillingProblem<f64>, opts: &ReferenceOptions) -> Result<ReferenceSolution> {
    let s = prob.agents();
    let t_len = prob.horizon();
    let mut diag = vec![prob.delta(); s * t_len];
    for e in &opts.extra {
        if e.agent >= s || e.diag.len() != t_len {
            return Err(Error::Config(format!("extra quadratic for agent {} is malformed", e.agent)));
        }
        for (t, q) in e.diag.iter().enumerate() {
            diag[e.agent * t_len + t] += q;
        }
    }
    let q = vec![0.0; s * t_len];
    let extra_grad = |c: &[f64]| {
        let mut g = vec![0.0; s * t_len];
        for e in &opts.extra {
            for (t, qd) in e.diag.iter().enumerate() {
                let k = e.agent * t_len + t;
                g[k] += qd * c[k];
            }
        }
        g
    };
    let mut raw = solve_qp(prob, &diag, 1.0, &q, None, opts)?;
    let mut kkt = kkt_report(prob, &raw.c, &raw.mu, &raw.lambda, &extra_grad(&raw.c))?;
    if prob.dim() <= POLISH_MAX_DIM {
        if let Some(p) = polish(prob, &diag, &raw) {
            let k = kkt_report(prob, &p.c, &p.mu, &p.lambda, &extra_grad(&p.c))?;
            if k.max() < kkt.max() {
                raw = p;
                kkt = k;
            }
        }
    }
    let objective = prob.objective(&raw.c)
        + opts
            .extra
            .iter()
            .map(|e| {
                0.5 * e
                    .diag
                    .iter()
                    .enumerate()
                    .map(|(t, q)| q * raw.c[e.agent * t_len + t].powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>();
    Ok(ReferenceSolution {
        c: raw.c,
        mu: raw.mu,
        lambda: raw.lambda,
        objective,
        kkt,
    })
}

/// Euclidean projection onto the feasible region (or onto a level set of the
/// aggregate); returns the projected point.
pub fn project_feasible(
    prob: &ValleyFillingProblem<f64>,
    query: &ProjectionQuery<'_>,
    opts: &ReferenceOptions,
) -> Result<Vec<f64>> {
    let n = prob.dim();
    if query.target.len() != n {
        return Err(Error::Dimension {
            context: "projection target",
            expected: n,
            got: query.target.len(),
        });
    }
    let diag = vec![1.0; n];
    let q: Vec<f64> = query.target.iter().map(|v| -v).collect();
    Ok(solve_qp(prob, &diag, 0.0, &q, query.aggregate, opts)?.c)
}

struct RawSolution {
    c: Vec<f64>,
    mu: Vec<f64>,
    lambda: Vec<f64>,
}

fn solve_qp(
    prob: &ValleyFillingProblem<f64>,
    c_diag: &[f64],
    agg_weight: f64,
    q_c: &[f64],
    fixed_aggregate: Option<&[f64]>,
    opts: &ReferenceOptions,
) -> Result<RawSolution> {
    let s = prob.agents();
    let t_len = prob.horizon();
    let nc = s * t_len;
    let nvar = nc + t_len;
    let sets = prob.sets();
    let eq_rows = if prob.eq().is_some() { t_len } else { 0 };
    let fix_rows = if fixed_aggregate.is_some() { t_len } else { 0 };
    let v_rows = prob.mu_len();
    let ineq_rows_per_t = prob.ineq().map_or(0, |c| c.d.rows());

    // Row layout: [balance T | energy s | equality coupling | pinned aggregate]
    // as zero cone, then [upper nc | lower nc | voltage] as nonnegative cone.
    let r_energy = t_len;
    let r_eq = r_energy + s;
    let r_fix = r_eq + eq_rows;
    let r_up = r_fix + fix_rows;
    let r_lo = r_up + nc;
    let r_v = r_lo + nc;
    let m = r_v + v_rows;

    let mut colptr = Vec::with_capacity(nvar + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for i in 0..s {
        for t in 0..t_len {
            let k = i * t_len + t;
            rowval.push(t);
            nzval.push(-prob.pbar()[i]);
            rowval.push(r_energy + i);
            nzval.push(sets[i].coeff[t]);
            if let Some(eq) = prob.eq() {
                rowval.push(r_eq + t);
                nzval.push(eq.weights[i]);
            }
            rowval.push(r_up + k);
            nzval.push(1.0);
            rowval.push(r_lo + k);
            nzval.push(-1.0);
            if let Some(cp) = prob.ineq() {
                for r in 0..ineq_rows_per_t {
                    let dv = cp.d.get(r, i);
                    if dv != 0.0 {
                        rowval.push(r_v + t * ineq_rows_per_t + r);
                        nzval.push(-dv);
                    }
                }
            }
            colptr.push(rowval.len());
        }
    }
    for t in 0..t_len {
        rowval.push(t);
        nzval.push(1.0);
        if fixed_aggregate.is_some() {
            rowval.push(r_fix + t);
            nzval.push(1.0);
        }
        colptr.push(rowval.len());
    }
    let a = CscMatrix::new(m, nvar, colptr, rowval, nzval);

    let mut b = Vec::with_capacity(m);
    b.extend_from_slice(prob.baseline());
    b.extend(sets.iter().map(|set| set.rhs));
    if let Some(eq) = prob.eq() {
        b.extend_from_slice(&eq.rhs);
    }
    if let Some(agg) = fixed_aggregate {
        if agg.len() != t_len {
            return Err(Error::Dimension {
                context: "pinned aggregate",
                expected: t_len,
                got: agg.len(),
            });
        }
        b.extend_from_slice(agg);
    }
    for set in sets {
        b.extend_from_slice(&set.upper);
    }
    for set in sets {
        b.extend(set.lower.iter().map(|v| -v));
    }
    if let Some(cp) = prob.ineq() {
        b.extend(cp.y_b.iter().map(|v| -v));
    }

    let p_diag: Vec<f64> = c_diag
        .iter()
        .copied()
        .chain(std::iter::repeat(agg_weight).take(t_len))
        .collect();
    let p = diag_csc(&p_diag);
    let mut q = q_c.to_vec();
    q.resize(nvar, 0.0);

    let cones: Vec<SupportedConeT<f64>> = vec![
        ZeroConeT(r_up),
        NonnegativeConeT(m - r_up),
    ];
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(opts.max_iter)
        .tol_gap_abs(opts.tol)
        .tol_gap_rel(opts.tol)
        .tol_feas(opts.tol)
        .tol_ktratio(1e-8)
        .build()
        .map_err(|e| Error::Solver(format!("{e:?}")))?;
    let mut solver =
        DefaultSolver::new(&p, &q, &a, &b, &cones, settings).map_err(|e| Error::Solver(e.to_string()))?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(Error::Infeasible(
                "no charging schedule satisfies the local sets and the voltage floor".into(),
            ))
        }
        other => return Err(Error::Solver(format!("interior-point solver stopped with {other:?}"))),
    }
    let x = &solver.solution.x;
    let z = &solver.solution.z;
    Ok(RawSolution {
        c: x[..nc].to_vec(),
        mu: z[r_v..r_v + v_rows].to_vec(),
        lambda: z[r_eq..r_eq + eq_rows].to_vec(),
    })
}

/// Largest stacked dimension for which the dense active-set polish runs.
pub const POLISH_MAX_DIM: usize = 2400;

const ACTIVE_TOL: f64 = 1e-7;

/// Active-set refinement of an interior-point solution: fixes the bounds
/// and voltage rows that look active, solves the resulting equality-
/// constrained QP exactly and repairs sign or bound violations.
fn polish(prob: &ValleyFillingProblem<f64>, c_diag: &[f64], start: &RawSolution) -> Option<RawSolution> {
    use nalgebra::{DMatrix, DVector};

    let s = prob.agents();
    let t_len = prob.horizon();
    let n = s * t_len;
    let sets = prob.sets();
    let pbar = prob.pbar();
    let rows_per_t = prob.ineq().map_or(0, |c| c.d.rows());

    // -1 lower, +1 upper, 0 free
    let mut fixed: Vec<i8> = (0..n)
        .map(|k| {
            let (i, t) = (k / t_len, k % t_len);
            let (lo, hi) = (sets[i].lower[t], sets[i].upper[t]);
            if hi - lo <= ACTIVE_TOL || start.c[k] - lo <= ACTIVE_TOL {
                -1
            } else if hi - start.c[k] <= ACTIVE_TOL {
                1
            } else {
                0
            }
        })
        .collect();
    let slack0 = prob.lagrangian_grad_dual(&start.c);
    let mut active_v: Vec<bool> = slack0.iter().map(|&g| g >= -ACTIVE_TOL).collect();

    for _ in 0..30 {
        let free: Vec<usize> = (0..n).filter(|&k| fixed[k] == 0).collect();
        let pos_of: Vec<Option<usize>> = {
            let mut v = vec![None; n];
            for (p, &k) in free.iter().enumerate() {
                v[k] = Some(p);
            }
            v
        };
        let c_fixed: Vec<f64> = (0..n)
            .map(|k| {
                let (i, t) = (k / t_len, k % t_len);
                match fixed[k] {
                    -1 => sets[i].lower[t],
                    1 => sets[i].upper[t],
                    _ => 0.0,
                }
            })
            .collect();
        // Constraint rows as (coefficients over all n, rhs).
        let mut cons: Vec<(Vec<(usize, f64)>, f64, Row)> = Vec::new();
        for (i, set) in sets.iter().enumerate() {
            let coef = (0..t_len).map(|t| (i * t_len + t, set.coeff[t])).collect();
            cons.push((coef, set.rhs, Row::Energy));
        }
        if let Some(eq) = prob.eq() {
            for t in 0..t_len {
                let coef = (0..s).map(|i| (i * t_len + t, eq.weights[i])).collect();
                cons.push((coef, eq.rhs[t], Row::Coupling(t)));
            }
        }
        if let Some(cp) = prob.ineq() {
            for t in 0..t_len {
                for r in 0..rows_per_t {
                    let idx = t * rows_per_t + r;
                    if active_v[idx] {
                        let coef = (0..s).map(|i| (i * t_len + t, -cp.d.get(r, i))).collect();
                        cons.push((coef, -cp.y_b[idx], Row::Voltage(idx)));
                    }
                }
            }
        }
        let nf = free.len();
        let nc = cons.len();
        let dim = nf + nc;
        let mut kkt = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        // Hessian of ½‖P_b + Mc‖² + ½cᵀdiag(c_diag)c on the free block.
        let agg_fixed = prob.aggregate(&c_fixed);
        for (a, &ka) in free.iter().enumerate() {
            let (ia, ta) = (ka / t_len, ka % t_len);
            for (b, &kb) in free.iter().enumerate() {
                let (ib, tb) = (kb / t_len, kb % t_len);
                if ta == tb {
                    kkt[(a, b)] = pbar[ia] * pbar[ib];
                }
            }
            kkt[(a, a)] += c_diag[ka];
            rhs[a] = -pbar[ia] * agg_fixed[ta];
        }
        for (j, (coef, b, _)) in cons.iter().enumerate() {
            let mut r = *b;
            for &(k, v) in coef {
                match pos_of[k] {
                    Some(p) => {
                        kkt[(nf + j, p)] = v;
                        kkt[(p, nf + j)] = v;
                    }
                    None => r -= v * c_fixed[k],
                }
            }
            rhs[nf + j] = r;
        }
        let sol = kkt.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut c = c_fixed.clone();
        for (p, &k) in free.iter().enumerate() {
            c[k] = sol[p];
        }
        let mut mu = vec![0.0; prob.mu_len()];
        let mut lambda = vec![0.0; prob.lambda_len()];
        let mut energy = vec![0.0; s];
        for (j, (_, _, row)) in cons.iter().enumerate() {
            let y = sol[nf + j];
            match row {
                Row::Energy => energy[j] = y,
                Row::Coupling(t) => lambda[*t] = y,
                Row::Voltage(idx) => mu[*idx] = y,
            }
        }

        let mut changed = false;
        // Free variables that left their box get fixed at the violated bound.
        for &k in &free {
            let (i, t) = (k / t_len, k % t_len);
            if c[k] < sets[i].lower[t] - ACTIVE_TOL {
                fixed[k] = -1;
                changed = true;
            } else if c[k] > sets[i].upper[t] + ACTIVE_TOL {
                fixed[k] = 1;
                changed = true;
            }
        }
        // Inactive voltage rows that are now violated become active.
        let slack = prob.lagrangian_grad_dual(&c);
        for (idx, &g) in slack.iter().enumerate() {
            if !active_v[idx] && g > ACTIVE_TOL {
                active_v[idx] = true;
                changed = true;
            }
        }
        if changed {
            continue;
        }
        // Sign repairs: negative voltage multipliers and bound multipliers
        // pointing the wrong way are released.
        for (idx, m) in mu.iter().enumerate() {
            if active_v[idx] && *m < -ACTIVE_TOL {
                active_v[idx] = false;
                changed = true;
            }
        }
        let agg = prob.aggregate(&c);
        for k in 0..n {
            if fixed[k] == 0 {
                continue;
            }
            let (i, t) = (k / t_len, k % t_len);
            let hi_lo = sets[i].upper[t] - sets[i].lower[t];
            if hi_lo <= ACTIVE_TOL {
                continue;
            }
            let mut r = pbar[i] * agg[t] + c_diag[k] * c[k] + energy[i] * sets[i].coeff[t];
            if let Some(eq) = prob.eq() {
                r += eq.weights[i] * lambda[t];
            }
            if let Some(cp) = prob.ineq() {
                for rr in 0..rows_per_t {
                    r -= cp.d.get(rr, i) * mu[t * rows_per_t + rr];
                }
            }
            if (fixed[k] == -1 && r < -ACTIVE_TOL) || (fixed[k] == 1 && r > ACTIVE_TOL) {
                fixed[k] = 0;
                changed = true;
            }
        }
        if !changed {
            for (k, v) in c.iter_mut().enumerate() {
                let (i, t) = (k / t_len, k % t_len);
                *v = v.clamp(sets[i].lower[t], sets[i].upper[t]);
            }
            mu.iter_mut().for_each(|m| *m = m.max(0.0));
            return Some(RawSolution { c, mu, lambda });
        }
    }
    None
}

#[derive(Debug, Clone, Copy)]
enum Row {
    Energy,
    Coupling(usize),
    Voltage(usize),
}

fn diag_csc(d: &[f64]) -> CscMatrix<f64> {
    let n = d.len();
    let mut colptr = Vec::with_capacity(n + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for (j, &v) in d.iter().enumerate() {
        if v != 0.0 {
            rowval.push(j);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(n, n, colptr, rowval, nzval)
}

/// KKT residuals computed from the problem definition alone.
/// `extra_grad` is any additional cost gradient beyond `F`.
pub fn kkt_report(
    prob: &ValleyFillingProblem<f64>,
    c: &[f64],
    mu: &[f64],
    lambda: &[f64],
    extra_grad: &[f64],
) -> Result<KktReport> {
    let mut g = prob.lagrangian_grad_primal_full(c, mu, lambda);
    for (gk, e) in g.iter_mut().zip(extra_grad) {
        *gk += e;
    }
    let step: Vec<f64> = c.iter().zip(&g).map(|(x, gk)| x - gk).collect();
    let proj = prob.project_all(&step)?;
    let diff: Vec<f64> = c.iter().zip(&proj).map(|(a, b)| a - b).collect();
    let stationarity = norm2(&diff);
    let slack = prob.lagrangian_grad_dual(c);
    let complementarity = mu
        .iter()
        .zip(&slack)
        .fold(0.0_f64, |m, (u, v)| m.max((u * v).abs()));
    let mut primal_violation = prob.ineq_violation(c);
    for r in prob.eq_residual(c) {
        primal_violation = primal_violation.max(r.abs());
    }
    for (i, set) in prob.sets().iter().enumerate() {
        let ci = prob.block(c, i);
        primal_violation = primal_violation.max(set.residual(ci).abs());
        for ((x, lo), hi) in ci.iter().zip(&set.lower).zip(&set.upper) {
            primal_violation = primal_violation.max(lo - x).max(x - hi);
        }
    }
    let dual_violation = mu.iter().fold(0.0_f64, |m, u| m.max(-u));
    Ok(KktReport {
        stationarity,
        complementarity,
        primal_violation,
        dual_violation,
    })
}
