//! Post-processing: deviation and objective-gap bounds between attack-free
//! and attacked optimizers, the weak-sharp variant for unregularized
//! instances, and per-scenario metrics.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attacks::{equivalent_objective, AttackSpec, ReshapeMatrix};
use crate::error::{Error, Result};
use crate::linalg::{dist2, mean, norm2, std_dev};
use crate::netmodel::{nodal_voltages, InjectionModel};
use crate::problem::ValleyFillingProblem;
use crate::reference::{project_feasible, reference_solve, ProjectionQuery, ReferenceOptions, ReferenceSolution};

/// Default activity tolerance for tangent-cone identification.
pub const TAU_ACT: f64 = 1e-6;
/// Rows whose slack lies in `(τ_act, AMBIGUITY_FACTOR·τ_act]` count as
/// ambiguous and are evaluated both ways.
pub const AMBIGUITY_FACTOR: f64 = 100.0;

/// Gradient bound of `‖Ac‖²` over the unit box: `2‖AᵀA‖·√T`.
pub fn goal_lipschitz(a: &ReshapeMatrix<f64>) -> f64 {
    let m = a.diag.iter().fold(0.0_f64, |m, &d| m.max(d * d));
    2.0 * m * (a.diag.len() as f64).sqrt()
}

/// `B = √(Σ ω_i L_i²)`.
pub fn subgradient_bound(omegas: &[f64], lipschitz: &[f64]) -> f64 {
    omegas.iter().zip(lipschitz).map(|(w, l)| w * l * l).sum::<f64>().sqrt()
}

/// `√(Σ ω_i² L_i²)`, the bound on `‖σ‖` when `G = Σ ω_i g_i`.
pub fn subgradient_bound_squared_weights(omegas: &[f64], lipschitz: &[f64]) -> f64 {
    omegas.iter().zip(lipschitz).map(|(w, l)| w * w * l * l).sum::<f64>().sqrt()
}

/// `B/m`. Refuses when the problem is not strongly convex.
pub fn deviation_bound(omegas: &[f64], lipschitz: &[f64], m_cert: f64) -> Result<f64> {
    if omegas.len() != lipschitz.len() {
        return Err(Error::Dimension {
            context: "attack weights vs Lipschitz constants",
            expected: omegas.len(),
            got: lipschitz.len(),
        });
    }
    if !(m_cert > 0.0) {
        return Err(Error::NotApplicable(format!(
            "strong-convexity modulus {m_cert} is not positive; use the weak-sharp check"
        )));
    }
    Ok(subgradient_bound(omegas, lipschitz) / m_cert)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SparseRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
}

impl SparseRow {
    pub fn unit(k: usize, sign: f64) -> Self {
        Self {
            idx: vec![k],
            val: vec![sign],
        }
    }

    pub fn dot(&self, v: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, &a)| a * v[i]).sum()
    }

    fn is_unit(&self) -> bool {
        self.idx.len() == 1
    }
}

/// `{d : eᵀd = 0 for every equality row, gᵀd ≥ 0 for every inequality row}`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolyCone {
    pub dim: usize,
    pub equalities: Vec<SparseRow>,
    pub inequalities: Vec<SparseRow>,
}

/// Minimum-norm correction onto `{d : r·d = 0, r ∈ rows}`. Unit rows are
/// eliminated; the rest go through a pseudo-inverse of their Gram matrix.
/// Returns `d` and one multiplier per row with `d = v + Σ λ_r r`.
fn eq_project(dim: usize, v: &[f64], rows: &[&SparseRow]) -> (Vec<f64>, Vec<f64>) {
    let mut fixed = vec![false; dim];
    for r in rows.iter().filter(|r| r.is_unit()) {
        fixed[r.idx[0]] = true;
    }
    let general: Vec<usize> = (0..rows.len()).filter(|&j| !rows[j].is_unit()).collect();
    let k = general.len();
    let mut lam = vec![0.0; rows.len()];
    let mut d: Vec<f64> = v.iter().enumerate().map(|(i, &x)| if fixed[i] { 0.0 } else { x }).collect();
    if k > 0 {
        // Restricted rows as dense maps keyed by coordinate.
        let restricted: Vec<Vec<(usize, f64)>> = general
            .iter()
            .map(|&j| {
                rows[j]
                    .idx
                    .iter()
                    .zip(&rows[j].val)
                    .filter(|(&i, _)| !fixed[i])
                    .map(|(&i, &a)| (i, a))
                    .collect()
            })
            .collect();
        let mut dense = vec![0.0; dim];
        let mut gram = DMatrix::<f64>::zeros(k, k);
        for a in 0..k {
            for &(i, x) in &restricted[a] {
                dense[i] = x;
            }
            for b in a..k {
                let s: f64 = restricted[b].iter().map(|&(i, y)| dense[i] * y).sum();
                gram[(a, b)] = s;
                gram[(b, a)] = s;
            }
            for &(i, _) in &restricted[a] {
                dense[i] = 0.0;
            }
        }
        let rhs = DVector::from_iterator(k, restricted.iter().map(|r| -r.iter().map(|&(i, a)| a * d[i]).sum::<f64>()));
        let svd = gram.svd(true, true);
        let smax = svd.singular_values.max();
        let y = svd
            .solve(&rhs, smax * 1e-12 * k as f64)
            .unwrap_or_else(|_| DVector::zeros(k));
        for (a, r) in restricted.iter().enumerate() {
            lam[general[a]] = y[a];
            for &(i, x) in r {
                d[i] += y[a] * x;
            }
        }
    }
    // Unit multipliers from the fixed coordinates' stationarity rows.
    let mut pushed = vec![0.0; dim];
    for &j in &general {
        for (&i, &a) in rows[j].idx.iter().zip(&rows[j].val) {
            pushed[i] += lam[j] * a;
        }
    }
    let mut first_unit = vec![usize::MAX; dim];
    for (j, r) in rows.iter().enumerate() {
        if r.is_unit() && first_unit[r.idx[0]] == usize::MAX {
            first_unit[r.idx[0]] = j;
            lam[j] = (-v[r.idx[0]] - pushed[r.idx[0]]) / r.val[0];
        }
    }
    (d, lam)
}

/// Exact Euclidean projection onto a polyhedral cone by an active-set loop
/// on the inequality rows.
pub fn project_onto_cone(cone: &PolyCone, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != cone.dim {
        return Err(Error::Dimension {
            context: "cone projection input",
            expected: cone.dim,
            got: v.len(),
        });
    }
    let scale = 1.0 + norm2(v);
    let tol = 1e-12 * scale;
    let n_in = cone.inequalities.len();
    let mut working: Vec<bool> = cone.inequalities.iter().map(|g| g.dot(v) < 0.0).collect();
    let max_pass = 50 + 4 * n_in;
    for _ in 0..max_pass {
        let mut rows: Vec<&SparseRow> = cone.equalities.iter().collect();
        let active: Vec<usize> = (0..n_in).filter(|&j| working[j]).collect();
        rows.extend(active.iter().map(|&j| &cone.inequalities[j]));
        let (d, lam) = eq_project(cone.dim, v, &rows);
        let n_eq = cone.equalities.len();
        let violated: Vec<usize> = (0..n_in)
            .filter(|&j| !working[j] && cone.inequalities[j].dot(&d) < -tol)
            .collect();
        if !violated.is_empty() {
            for j in violated {
                working[j] = true;
            }
            continue;
        }
        let worst = active
            .iter()
            .enumerate()
            .map(|(a, &j)| (j, lam[n_eq + a]))
            .filter(|&(_, z)| z < -tol)
            .min_by(|x, y| x.1.total_cmp(&y.1));
        match worst {
            Some((j, _)) => working[j] = false,
            None => return Ok(d),
        }
    }
    Err(Error::Solver("cone projection did not settle its active set".into()))
}

/// Tangent cones of the feasible region at a point: `tight` treats
/// ambiguous rows as active, `loose` as inactive.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentCones {
    pub tight: PolyCone,
    pub loose: PolyCone,
    pub ambiguous: usize,
}

enum Activity {
    Active,
    Ambiguous,
    Inactive,
}

fn classify(slack: f64, tol: f64) -> Activity {
    if slack <= tol {
        Activity::Active
    } else if slack <= AMBIGUITY_FACTOR * tol {
        Activity::Ambiguous
    } else {
        Activity::Inactive
    }
}

/// Tangent cones at `c` of the region `{c_i ∈ ℂ_i, coupling}`.
/// With `agent`, only that agent's local set (box and energy row) is used,
/// in block coordinates.
pub fn tangent_cones(prob: &ValleyFillingProblem<f64>, c: &[f64], tau_act: f64, agent: Option<usize>) -> TangentCones {
    let t_len = prob.horizon();
    let agents: Vec<usize> = match agent {
        Some(i) => vec![i],
        None => (0..prob.agents()).collect(),
    };
    let offset = |i: usize| if agent.is_some() { 0 } else { i * t_len };
    let dim = agents.len() * t_len;
    let mut tight = PolyCone {
        dim,
        ..Default::default()
    };
    let mut loose = tight.clone();
    let mut ambiguous = 0;
    let mut push_ineq = |row: SparseRow, act: Activity| match act {
        Activity::Active => {
            tight.inequalities.push(row.clone());
            loose.inequalities.push(row);
        }
        Activity::Ambiguous => {
            ambiguous += 1;
            tight.inequalities.push(row);
        }
        Activity::Inactive => {}
    };
    let mut equalities = Vec::new();
    for &i in &agents {
        let set = &prob.sets()[i];
        let ci = prob.block(c, i);
        for t in 0..t_len {
            let k = offset(i) + t;
            if set.upper[t] - set.lower[t] <= tau_act {
                equalities.push(SparseRow::unit(k, 1.0));
                continue;
            }
            let lo = ci[t] - set.lower[t];
            let up = set.upper[t] - ci[t];
            if lo <= up {
                push_ineq(SparseRow::unit(k, 1.0), classify(lo, tau_act));
            } else {
                push_ineq(SparseRow::unit(k, -1.0), classify(up, tau_act));
            }
        }
        equalities.push(SparseRow {
            idx: (0..t_len).map(|t| offset(i) + t).collect(),
            val: set.coeff.clone(),
        });
    }
    if agent.is_none() {
        if let Some(eq) = prob.eq() {
            for t in 0..t_len {
                equalities.push(SparseRow {
                    idx: (0..prob.agents()).map(|i| i * t_len + t).collect(),
                    val: eq.weights.clone(),
                });
            }
        }
        if let Some(cp) = prob.ineq() {
            let grad = prob.lagrangian_grad_dual(c);
            let rows = cp.d.rows();
            for t in 0..t_len {
                for r in 0..rows {
                    let row = t * rows + r;
                    let (idx, val): (Vec<usize>, Vec<f64>) = (0..prob.agents())
                        .filter(|&i| cp.d.get(r, i) != 0.0)
                        .map(|i| (i * t_len + t, cp.d.get(r, i)))
                        .unzip();
                    if idx.is_empty() {
                        continue;
                    }
                    let tol = tau_act * cp.y_b[row].abs().max(1.0);
                    push_ineq(SparseRow { idx, val }, classify(-grad[row], tol));
                }
            }
        }
    }
    tight.equalities = equalities.clone();
    loose.equalities = equalities;
    TangentCones { tight, loose, ambiguous }
}

/// `‖Π_ψ(v)‖` under both activity readings, `(tight, loose)`.
pub fn tangent_cone_projection(cones: &TangentCones, v: &[f64]) -> Result<(f64, f64)> {
    let tight = norm2(&project_onto_cone(&cones.tight, v)?);
    let loose = if cones.ambiguous == 0 {
        tight
    } else {
        norm2(&project_onto_cone(&cones.loose, v)?)
    };
    Ok((tight, loose))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub slack: f64,
    pub ok: bool,
}

impl BoundCheck {
    fn new(lhs: f64, rhs: f64, tol: f64) -> Self {
        Self {
            lhs,
            rhs,
            slack: rhs - lhs,
            ok: lhs <= rhs + tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentBound {
    pub agent: usize,
    /// `L_{g_i}`; zero for agents without a goal.
    pub lipschitz: f64,
    pub dev: f64,
    /// `‖Π_{ψ_i}(−σ_i)‖/m` with `ψ_i` the tangent cone of the agent's local set.
    pub projected_bound: f64,
    /// `L_{g_i}/m`
    pub lipschitz_bound: f64,
    pub projected_ok: bool,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub m_cert: f64,
    pub omegas: Vec<f64>,
    pub lipschitz: Vec<f64>,
    /// `√(Σ ω_i L_i²)` as stated.
    pub b: f64,
    /// `√(Σ ω_i² L_i²)`, the alternative reading; reported, not asserted.
    pub b_squared_weights: f64,
    pub sigma_star: Vec<f64>,
    pub sigma_norm: f64,
    /// `‖Π_ψ(−σ*)‖` with ambiguous rows inactive (the larger value).
    pub tangent_proj: f64,
    /// Same with ambiguous rows active.
    pub tangent_proj_tight: f64,
    /// `‖Π_ψ(σ*)‖`, the sign as printed; reported, not asserted.
    pub tangent_proj_plus: f64,
    pub ambiguous_rows: usize,
    pub dev: f64,
    pub objective_free: f64,
    pub objective_attacked: f64,
    pub obj_gap: f64,
    pub l_f: f64,
    /// `∇F(𝒞*)ᵀ(𝒞_A* − 𝒞*)`, the first-order term the smoothness bound omits.
    pub first_order_term: f64,
    pub per_agent_dev: Vec<f64>,
    pub per_agent: Vec<AgentBound>,
    /// `dev ≤ ‖Π_ψ(−σ*)‖/m`
    pub deviation_projected: BoundCheck,
    /// `dev ≤ B/m`
    pub deviation: BoundCheck,
    /// `‖Π_ψ(−σ*)‖ ≤ B`
    pub projection_chain: BoundCheck,
    pub gap_nonnegative: bool,
    /// `gap ≤ ‖Π_ψ(−σ*)‖²/(2m)`
    pub gap_projected: BoundCheck,
    /// `gap ≤ (L_F/2)·dev²`
    pub gap_smoothness: BoundCheck,
    pub per_agent_ok: bool,
    /// A negative gap beyond tolerance means the reference solutions are off.
    pub oracle_failure: bool,
    pub kkt_free: f64,
    pub kkt_attacked: f64,
    pub notes: Vec<String>,
    pub bound_ok: bool,
}

/// The goal terms `(agent, ω, A)` of primal-equivalent attacks.
fn goal_terms(attacks: &[AttackSpec<f64>], t_len: usize) -> Result<Vec<(usize, f64, ReshapeMatrix<f64>)>> {
    let mut out = Vec::new();
    for a in attacks {
        out.extend(a.goals(t_len)?);
    }
    Ok(out)
}

/// Solves the attack-free and attacked problems with the reference solver
/// and evaluates every deviation and gap bound.
pub fn bounds_report(
    prob: &ValleyFillingProblem<f64>,
    attacks: &[AttackSpec<f64>],
    reference: &ReferenceOptions,
    tau_act: f64,
) -> Result<BoundsReport> {
    let free = reference_solve(prob, reference)?;
    let mut opts = reference.clone();
    opts.extra = equivalent_objective(attacks, prob.horizon())?;
    let attacked = if opts.extra.is_empty() {
        free.clone()
    } else {
        reference_solve(prob, &opts)?
    };
    bounds_from_solutions(prob, attacks, &free, &attacked, tau_act)
}

/// Bound evaluation for two given optimizers.
pub fn bounds_from_solutions(
    prob: &ValleyFillingProblem<f64>,
    attacks: &[AttackSpec<f64>],
    free: &ReferenceSolution,
    attacked: &ReferenceSolution,
    tau_act: f64,
) -> Result<BoundsReport> {
    let t_len = prob.horizon();
    let s = prob.agents();
    let m = prob.strong_convexity();
    if !(m > 0.0) {
        return Err(Error::NotApplicable(
            "the objective is not strongly convex (δ = 0); use the weak-sharp check".into(),
        ));
    }
    let terms = goal_terms(attacks, t_len)?;
    let omegas: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let lipschitz: Vec<f64> = terms.iter().map(|t| goal_lipschitz(&t.2)).collect();
    let b = subgradient_bound(&omegas, &lipschitz);

    let c_star = &free.c;
    let c_att = &attacked.c;
    let mut sigma = vec![0.0; prob.dim()];
    let mut agent_l = vec![0.0; s];
    for ((agent, omega, a), l) in terms.iter().zip(&lipschitz) {
        let g = a.goal_grad(prob.block(c_star, *agent));
        for (t, v) in g.into_iter().enumerate() {
            sigma[agent * t_len + t] += omega * v;
        }
        agent_l[*agent] += l;
    }
    let neg_sigma: Vec<f64> = sigma.iter().map(|v| -v).collect();
    let cones = tangent_cones(prob, c_star, tau_act, None);
    let (proj_tight, proj_loose) = tangent_cone_projection(&cones, &neg_sigma)?;
    let (proj_plus, _) = tangent_cone_projection(&cones, &sigma)?;

    let dev = dist2(c_att, c_star);
    let f_free = prob.objective(c_star);
    let f_att = prob.objective(c_att);
    let gap = f_att - f_free;
    let l_f = prob.hessian_norm_estimate();
    let grad = prob.objective_grad(c_star);
    let first_order: f64 = grad.iter().zip(c_att).zip(c_star).map(|((g, a), b)| g * (a - b)).sum();

    let scale = 1.0 + f_free.abs();
    let tol = 1e-9 * scale;
    let dev_tol = 1e-7 * (1.0 + norm2(c_star));

    let mut per_agent = Vec::with_capacity(s);
    let mut per_agent_dev = Vec::with_capacity(s);
    for i in 0..s {
        let d_i = dist2(prob.block(c_att, i), prob.block(c_star, i));
        per_agent_dev.push(d_i);
        let cone_i = tangent_cones(prob, c_star, tau_act, Some(i));
        let (_, p_i) = tangent_cone_projection(&cone_i, &neg_sigma[i * t_len..(i + 1) * t_len])?;
        let projected_bound = p_i / m;
        let lipschitz_bound = agent_l[i] / m;
        per_agent.push(AgentBound {
            agent: i,
            lipschitz: agent_l[i],
            dev: d_i,
            projected_bound,
            lipschitz_bound,
            projected_ok: d_i <= projected_bound + dev_tol,
            ok: d_i <= lipschitz_bound + dev_tol,
        });
    }

    let deviation_projected = BoundCheck::new(dev, proj_loose / m, dev_tol);
    let deviation = BoundCheck::new(dev, b / m, dev_tol);
    let projection_chain = BoundCheck::new(proj_loose, b, 1e-9 * (1.0 + b));
    let gap_projected = BoundCheck::new(gap, proj_loose * proj_loose / (2.0 * m), tol);
    let gap_smoothness = BoundCheck::new(gap, 0.5 * l_f * dev * dev, tol);
    let oracle_failure = gap < -tol;
    let per_agent_ok = per_agent.iter().all(|a| a.ok);

    let mut notes = vec![
        "B is evaluated as sqrt(sum omega_i L_i^2); b_squared_weights gives sqrt(sum omega_i^2 L_i^2) for comparison".to_string(),
        "tangent projections use -sigma*, the direction the attacked optimizer moves in".to_string(),
    ];
    if cones.ambiguous > 0 {
        notes.push(format!(
            "{} constraint rows lie in the activity band; checks use the larger projection",
            cones.ambiguous
        ));
    }
    if oracle_failure {
        notes.push("negative objective gap: the reference solutions are inaccurate".into());
    }
    let bound_ok = !oracle_failure
        && deviation.ok
        && deviation_projected.ok
        && projection_chain.ok
        && gap_projected.ok
        && gap_smoothness.ok
        && per_agent_ok;
    Ok(BoundsReport {
        m_cert: m,
        omegas,
        lipschitz,
        b,
        b_squared_weights: subgradient_bound_squared_weights(
            &terms.iter().map(|t| t.1).collect::<Vec<_>>(),
            &terms.iter().map(|t| goal_lipschitz(&t.2)).collect::<Vec<_>>(),
        ),
        sigma_norm: norm2(&sigma),
        sigma_star: sigma,
        tangent_proj: proj_loose,
        tangent_proj_tight: proj_tight,
        tangent_proj_plus: proj_plus,
        ambiguous_rows: cones.ambiguous,
        dev,
        objective_free: f_free,
        objective_attacked: f_att,
        obj_gap: gap,
        l_f,
        first_order_term: first_order,
        per_agent_dev,
        per_agent,
        deviation_projected,
        deviation,
        projection_chain,
        gap_nonnegative: gap >= -tol,
        gap_projected,
        gap_smoothness,
        per_agent_ok,
        oracle_failure,
        kkt_free: free.kkt.max(),
        kkt_attacked: attacked.kkt.max(),
        notes,
        bound_ok,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeakSharpReport {
    /// Sampled estimate of the weak-sharp modulus; empirical, not certified.
    pub alpha_est: f64,
    pub samples: usize,
    pub b: f64,
    /// `dist(𝒞_A*, S*)`
    pub dist: f64,
    /// `B/α_est`, absent without a certificate.
    pub bound: Option<f64>,
    pub ok: Option<bool>,
    pub note: String,
}

/// Options of the sampling estimator for the weak-sharp modulus.
#[derive(Debug, Clone, PartialEq)]
pub struct WeakSharpOptions {
    pub seed: u64,
    /// Perturbation radii around `𝒞*`.
    pub radii: Vec<f64>,
    pub per_radius: usize,
    /// Below this the estimate counts as zero.
    pub alpha_floor: f64,
}

impl Default for WeakSharpOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            radii: vec![1e-2, 3e-2, 1e-1, 3e-1, 1.0],
            per_radius: 6,
            alpha_floor: 1e-9,
        }
    }
}

/// Distance to the optimal set `S* = {feasible 𝒞 with the optimal aggregate}`.
/// `F` depends on `𝒞` through the aggregate plus `½δ‖𝒞‖²`, so for δ = 0 the
/// optimal set is the feasible region with the aggregate pinned.
fn dist_to_solution_set(prob: &ValleyFillingProblem<f64>, x: &[f64], agg: &[f64], opts: &ReferenceOptions) -> Result<f64> {
    let p = project_feasible(
        prob,
        &ProjectionQuery {
            target: x,
            aggregate: Some(agg),
        },
        opts,
    )?;
    Ok(dist2(x, &p))
}

/// Empirical weak-sharp check: estimates `α` as the smallest
/// `(F(x) − F*)/dist(x, S*)` over projected random perturbations of `𝒞*`,
/// then compares `dist(𝒞_A*, S*)` with `B/α`.
pub fn weak_sharp_check(
    prob: &ValleyFillingProblem<f64>,
    attacks: &[AttackSpec<f64>],
    reference: &ReferenceOptions,
    ws: &WeakSharpOptions,
) -> Result<WeakSharpReport> {
    if prob.delta() != 0.0 {
        return Err(Error::NotApplicable(
            "the weak-sharp check applies to the unregularized objective (δ = 0)".into(),
        ));
    }
    let terms = goal_terms(attacks, prob.horizon())?;
    let omegas: Vec<f64> = terms.iter().map(|t| t.1).collect();
    let lipschitz: Vec<f64> = terms.iter().map(|t| goal_lipschitz(&t.2)).collect();
    let b = subgradient_bound(&omegas, &lipschitz);

    let free = reference_solve(prob, reference)?;
    let agg = prob.aggregate(&free.c);
    let f_star = prob.objective(&free.c);
    let mut rng = ChaCha8Rng::seed_from_u64(ws.seed);
    let n = prob.dim();
    let mut alpha = f64::INFINITY;
    let mut samples = 0;
    for &r in &ws.radii {
        for _ in 0..ws.per_radius {
            let xi: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scale = r / norm2(&xi).max(f64::MIN_POSITIVE);
            let target: Vec<f64> = free.c.iter().zip(&xi).map(|(c, x)| c + scale * x).collect();
            let x = project_feasible(
                prob,
                &ProjectionQuery {
                    target: &target,
                    aggregate: None,
                },
                reference,
            )?;
            let d = dist_to_solution_set(prob, &x, &agg, reference)?;
            if d < 1e-9 {
                continue;
            }
            samples += 1;
            alpha = alpha.min(((prob.objective(&x) - f_star) / d).max(0.0));
        }
    }
    let mut opts = reference.clone();
    opts.extra = equivalent_objective(attacks, prob.horizon())?;
    let dist = if opts.extra.is_empty() {
        0.0
    } else {
        let attacked = reference_solve(prob, &opts)?;
        dist_to_solution_set(prob, &attacked.c, &agg, reference)?
    };
    if samples == 0 || !(alpha > ws.alpha_floor) {
        return Ok(WeakSharpReport {
            alpha_est: if alpha.is_finite() { alpha } else { 0.0 },
            samples,
            b,
            dist,
            bound: None,
            ok: None,
            note: "no weak-sharp certificate: sampled modulus is zero".into(),
        });
    }
    let bound = b / alpha;
    Ok(WeakSharpReport {
        alpha_est: alpha,
        samples,
        b,
        dist,
        bound: Some(bound),
        ok: Some(dist <= bound + 1e-7),
        note: "alpha is a sampled estimate, not a certified modulus".into(),
    })
}

/// Relative deviations of one profile from another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct Deviation {
    /// `mean_t |a − b| / mean_t |b|`
    pub mean_rel: f64,
    /// `(mean a − mean b)/mean b`
    pub mean_shift: f64,
    /// `‖a − b‖/‖b‖`
    pub l2_rel: f64,
}

pub fn profile_deviation(a: &[f64], b: &[f64]) -> Deviation {
    let mb: f64 = b.iter().map(|v| v.abs()).sum::<f64>() / b.len().max(1) as f64;
    let md: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / b.len().max(1) as f64;
    let nb = norm2(b);
    let safe = |num: f64, den: f64| if den > 0.0 { num / den } else if num == 0.0 { 0.0 } else { f64::INFINITY };
    let (ma, mbs) = (mean(a), mean(b));
    Deviation {
        mean_rel: safe(md, mb),
        mean_shift: safe(ma - mbs, mbs.abs()),
        l2_rel: safe(dist2(a, b), nb),
    }
}

/// Coefficient of variation of `x[a..b]`.
pub fn flatness(x: &[f64]) -> f64 {
    let m = mean(x);
    if m == 0.0 {
        0.0
    } else {
        std_dev(x) / m.abs()
    }
}

/// Fraction of steps that follow an oscillation pattern. A step `t → t+1`
/// is scored when the goal weight changes there and it lies inside the span
/// where the profile charges; it matches when the profile moves against the
/// weight (up into a cheap slot, down into an expensive one) by at least half
/// the profile's range over that span.
pub fn oscillation_score(profile: &[f64], weights: &[f64]) -> Option<f64> {
    let peak = profile.iter().cloned().fold(0.0_f64, f64::max);
    if peak <= 0.0 {
        return None;
    }
    let on = |v: f64| v > 1e-3 * peak;
    let first = profile.iter().position(|&v| on(v))?;
    let last = profile.iter().rposition(|&v| on(v))?;
    let span = &profile[first..=last];
    let lo = span.iter().cloned().fold(f64::INFINITY, f64::min);
    let amp = 0.5 * (peak - lo);
    let mut considered = 0usize;
    let mut matched = 0usize;
    for t in first.saturating_sub(1)..=last {
        if t + 1 >= profile.len() || weights[t] == weights[t + 1] {
            continue;
        }
        considered += 1;
        let step = profile[t + 1] - profile[t];
        let want = if weights[t + 1] < weights[t] { 1.0 } else { -1.0 };
        if amp > 0.0 && step * want >= amp {
            matched += 1;
        }
    }
    (considered > 0).then(|| matched as f64 / considered as f64)
}

/// Share of the profile's energy delivered in the 1-based slots `theta`.
pub fn energy_fraction(profile: &[f64], coeff: &[f64], theta: &[usize]) -> f64 {
    let total: f64 = profile.iter().zip(coeff).map(|(c, a)| c * a).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = theta.iter().map(|&t| profile[t - 1] * coeff[t - 1]).sum();
    inside / total
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoalAttainment {
    pub attack: usize,
    pub agent: usize,
    /// `energy_in_theta`, `flatness` or `oscillation`.
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioMetrics {
    pub converged: bool,
    pub iterations: usize,
    /// Total load (kW) per slot.
    pub total_load_kw: Vec<f64>,
    pub valley_window: Option<(usize, usize)>,
    pub valley_mean_kw: Option<f64>,
    /// std/mean of the total load inside the valley window.
    pub valley_flatness: Option<f64>,
    pub min_voltage_pu: Option<f64>,
    pub voltage_violations: usize,
    /// Mean over victims of [`oscillation_score`], battery-damage attacks only.
    pub oscillation_score: Option<f64>,
    pub goal_attainment: Vec<GoalAttainment>,
    /// Deviation of the whole stacked profile from a comparison run.
    pub attack_deviation: Option<Deviation>,
}

/// Inputs of [`scenario_metrics`] beyond the solution itself.
#[derive(Default)]
pub struct MetricsContext<'a> {
    pub injection: Option<&'a InjectionModel<f64>>,
    /// Half-open slot window for the flatness metric.
    pub valley_window: Option<(usize, usize)>,
    /// kW per objective power unit.
    pub objective_base_kw: f64,
    /// Voltage floor (p.u.) for counting violations.
    pub v_floor: Option<f64>,
    /// Solution to measure the attack deviation against.
    pub comparison: Option<&'a [f64]>,
}

pub fn scenario_metrics(
    prob: &ValleyFillingProblem<f64>,
    solution: &[f64],
    converged: bool,
    iterations: usize,
    attacks: &[AttackSpec<f64>],
    ctx: &MetricsContext<'_>,
) -> Result<ScenarioMetrics> {
    let t_len = prob.horizon();
    let base = if ctx.objective_base_kw > 0.0 { ctx.objective_base_kw } else { 1.0 };
    let total: Vec<f64> = prob.aggregate(solution).iter().map(|v| v * base).collect();
    let (valley_mean, valley_flat) = match ctx.valley_window {
        Some((a, b)) => {
            if a >= b || b > t_len {
                return Err(Error::Config(format!("valley window [{a}, {b}) invalid for horizon {t_len}")));
            }
            (Some(mean(&total[a..b])), Some(flatness(&total[a..b])))
        }
        None => (None, None),
    };
    let mut min_v = None;
    let mut violations = 0;
    if let Some(inj) = ctx.injection {
        let s = prob.agents();
        let floor = ctx.v_floor.unwrap_or(0.0);
        let mut vmin = f64::INFINITY;
        for t in 0..t_len {
            let c_t: Vec<f64> = (0..s).map(|i| solution[i * t_len + t]).collect();
            for v in nodal_voltages(inj, &c_t, t)? {
                let mag = v.max(0.0).sqrt();
                vmin = vmin.min(mag);
                if mag < floor - 1e-9 {
                    violations += 1;
                }
            }
        }
        min_v = Some(vmin);
    }

    let mut goals = Vec::new();
    let mut osc = Vec::new();
    for (index, spec) in attacks.iter().enumerate() {
        let base_spec = match spec {
            AttackSpec::Stealthy { inner, .. } => inner.as_ref(),
            other => other,
        };
        match base_spec {
            AttackSpec::SmoothCharging { attacker, .. } => goals.push(GoalAttainment {
                attack: index,
                agent: *attacker,
                metric: "flatness".into(),
                value: flatness(prob.block(solution, *attacker)),
            }),
            AttackSpec::TimeTuning { attacker, theta, .. } => goals.push(GoalAttainment {
                attack: index,
                agent: *attacker,
                metric: "energy_in_theta".into(),
                value: energy_fraction(prob.block(solution, *attacker), &prob.sets()[*attacker].coeff, theta),
            }),
            AttackSpec::BatteryDamage { victims, t_f, m, big_m, .. } => {
                let w = crate::attacks::battery_damage_matrix(*t_f, *m, *big_m, t_len)?.diag;
                for &v in victims {
                    if let Some(sc) = oscillation_score(prob.block(solution, v), &w) {
                        osc.push(sc);
                        goals.push(GoalAttainment {
                            attack: index,
                            agent: v,
                            metric: "oscillation".into(),
                            value: sc,
                        });
                    }
                }
            }
            AttackSpec::DualFull { attacker, goal, .. } | AttackSpec::DualPowerBalance { attacker, goal, .. } => {
                let c = prob.block(solution, *attacker);
                let (metric, value) = match goal {
                    crate::attacks::GoalSpec::TimeTuning { theta, .. } => (
                        "energy_in_theta",
                        energy_fraction(c, &prob.sets()[*attacker].coeff, theta),
                    ),
                    _ => ("flatness", flatness(c)),
                };
                goals.push(GoalAttainment {
                    attack: index,
                    agent: *attacker,
                    metric: metric.into(),
                    value,
                });
            }
            AttackSpec::Stealthy { .. } => {}
        }
    }
    let attack_deviation = if attacks.is_empty() {
        Some(Deviation::default())
    } else {
        ctx.comparison.map(|c| profile_deviation(solution, c))
    };
    Ok(ScenarioMetrics {
        converged,
        iterations,
        total_load_kw: total,
        valley_window: ctx.valley_window,
        valley_mean_kw: valley_mean,
        valley_flatness: valley_flat,
        min_voltage_pu: min_v,
        voltage_violations: violations,
        oscillation_score: (!osc.is_empty()).then(|| osc.iter().sum::<f64>() / osc.len() as f64),
        goal_attainment: goals,
        attack_deviation,
    })
}
