//! Valley-filling problem: objective, coupling constraints and the pieces
//! of the relaxed Lagrangian used by the operator and the oracles.
//!
//! Layouts: the stacked fleet profile is agent-major (`i·T + t`); coupling
//! multipliers are time-major (`t·rows + row`).

use crate::error::{check_len, Error, Result};
use crate::fleet::{EvSpec, FeasibleSet};
use crate::linalg::{power_iteration, Matrix};
use crate::netmodel::{DistributionNetwork, InjectionModel};
use crate::scalar::Scalar;

/// `𝒴_b − Σ_i 𝒟_i c_i ≤ 0` with `𝒟_i` the time-block-diagonal lift of
/// column `i` of `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct InequalityCoupling<S> {
    /// `rows × s`
    pub d: Matrix<S>,
    /// `rows·T`, time-major.
    pub y_b: Vec<S>,
}

/// `R(𝒞)_t = Σ_i w_i c_i(t) − b_t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EqualityCoupling<S> {
    pub weights: Vec<S>,
    pub rhs: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValleyFillingProblem<S> {
    horizon: usize,
    sets: Vec<FeasibleSet<S>>,
    /// Objective weight of each agent (max charging power in objective units).
    pbar: Vec<S>,
    /// Aggregate baseline in objective units.
    p_b: Vec<S>,
    ineq: Option<InequalityCoupling<S>>,
    eq: Option<EqualityCoupling<S>>,
    delta: S,
    /// Bus of each agent, when built from a network.
    buses: Vec<usize>,
}

/// Builder-style constructor arguments for problems that are not tied to a
/// feeder (toy instances, synthetic equality-coupled variants).
#[derive(Debug, Clone)]
pub struct ProblemParts<S> {
    pub sets: Vec<FeasibleSet<S>>,
    pub pbar: Vec<S>,
    pub p_b: Vec<S>,
    pub ineq: Option<InequalityCoupling<S>>,
    pub eq: Option<EqualityCoupling<S>>,
    pub delta: S,
}

impl<S: Scalar> ValleyFillingProblem<S> {
    pub fn from_parts(parts: ProblemParts<S>) -> Result<Self> {
        let ProblemParts {
            sets,
            pbar,
            p_b,
            ineq,
            eq,
            delta,
        } = parts;
        let s = sets.len();
        if s == 0 {
            return Err(Error::Config("problem needs at least one agent".into()));
        }
        let horizon = p_b.len();
        check_len("objective weights", s, pbar.len())?;
        for set in &sets {
            check_len("feasible set horizon", horizon, set.horizon())?;
        }
        if delta < S::zero() {
            return Err(Error::Config("regularizer must be nonnegative".into()));
        }
        if let Some(c) = &ineq {
            check_len("inequality coupling agents", s, c.d.cols())?;
            check_len("inequality coupling rhs", c.d.rows() * horizon, c.y_b.len())?;
        }
        if let Some(c) = &eq {
            check_len("equality coupling weights", s, c.weights.len())?;
            check_len("equality coupling rhs", horizon, c.rhs.len())?;
        }
        Ok(Self {
            horizon,
            sets,
            pbar,
            p_b,
            ineq,
            eq,
            delta,
            buses: vec![0; s],
        })
    }

    /// Valley filling on a feeder with the voltage-floor coupling.
    /// `objective_base_kw` rescales powers in the objective (1 keeps kW).
    pub fn on_network(
        net: &DistributionNetwork<S>,
        inj: &InjectionModel<S>,
        fleet: &[EvSpec<S>],
        baseline_kw: &[S],
        windows: Option<&[Option<(usize, usize)>]>,
        delta: S,
        objective_base_kw: S,
    ) -> Result<Self> {
        check_len("fleet", inj.agents(), fleet.len())?;
        check_len("baseline horizon", inj.horizon(), baseline_kw.len())?;
        let horizon = inj.horizon();
        let sets = fleet
            .iter()
            .enumerate()
            .map(|(i, ev)| FeasibleSet::from_spec(ev, horizon, windows.and_then(|w| w[i])))
            .collect::<Result<Vec<_>>>()?;
        let floor = net.floor_sq();
        let y_b = inj.y_d().iter().map(|&y| floor - y).collect();
        let mut prob = Self::from_parts(ProblemParts {
            sets,
            pbar: fleet.iter().map(|e| e.p_max / objective_base_kw).collect(),
            p_b: baseline_kw.iter().map(|&p| p / objective_base_kw).collect(),
            ineq: Some(InequalityCoupling {
                d: inj.d().clone(),
                y_b,
            }),
            eq: None,
            delta,
        })?;
        prob.buses = fleet.iter().map(|e| e.bus).collect();
        Ok(prob)
    }

    pub fn agents(&self) -> usize {
        self.sets.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.agents() * self.horizon
    }

    pub fn sets(&self) -> &[FeasibleSet<S>] {
        &self.sets
    }

    pub fn pbar(&self) -> &[S] {
        &self.pbar
    }

    pub fn baseline(&self) -> &[S] {
        &self.p_b
    }

    pub fn ineq(&self) -> Option<&InequalityCoupling<S>> {
        self.ineq.as_ref()
    }

    pub fn eq(&self) -> Option<&EqualityCoupling<S>> {
        self.eq.as_ref()
    }

    pub fn delta(&self) -> S {
        self.delta
    }

    pub fn buses(&self) -> &[usize] {
        &self.buses
    }

    pub fn with_delta(mut self, delta: S) -> Self {
        self.delta = delta;
        self
    }

    /// Number of inequality multipliers (`rows·T`).
    pub fn mu_len(&self) -> usize {
        self.ineq.as_ref().map_or(0, |c| c.d.rows() * self.horizon)
    }

    /// Number of equality multipliers (`T` or 0).
    pub fn lambda_len(&self) -> usize {
        if self.eq.is_some() {
            self.horizon
        } else {
            0
        }
    }

    pub fn block<'a>(&self, c: &'a [S], i: usize) -> &'a [S] {
        &c[i * self.horizon..(i + 1) * self.horizon]
    }

    /// `P_b + Σ_i P̄_i c_i`
    pub fn aggregate(&self, c: &[S]) -> Vec<S> {
        let mut agg = self.p_b.clone();
        for (i, &p) in self.pbar.iter().enumerate() {
            for (a, &x) in agg.iter_mut().zip(self.block(c, i)) {
                *a += p * x;
            }
        }
        agg
    }

    /// `F(𝒞) = ½‖P_b + Σ P̄_i c_i‖² + ½δ‖𝒞‖²`
    pub fn objective(&self, c: &[S]) -> S {
        assert_eq!(c.len(), self.dim());
        let agg = self.aggregate(c);
        let base = S::half() * agg.iter().map(|&v| v * v).sum::<S>();
        base + S::half() * self.delta * c.iter().map(|&v| v * v).sum::<S>()
    }

    /// `∇_{c_i} F` given a precomputed aggregate.
    pub fn objective_grad_block(&self, agg: &[S], c_i: &[S], i: usize) -> Vec<S> {
        let p = self.pbar[i];
        agg.iter().zip(c_i).map(|(&a, &x)| p * a + self.delta * x).collect()
    }

    pub fn objective_grad(&self, c: &[S]) -> Vec<S> {
        let agg = self.aggregate(c);
        (0..self.agents())
            .flat_map(|i| self.objective_grad_block(&agg, self.block(c, i), i))
            .collect()
    }

    /// `(𝒟_iᵀμ)_t = Σ_r D[r, i]·μ[t·rows + r]`
    pub fn lifted_tr_apply(&self, i: usize, mu: &[S]) -> Vec<S> {
        match &self.ineq {
            None => vec![S::zero(); self.horizon],
            Some(c) => {
                let rows = c.d.rows();
                (0..self.horizon)
                    .map(|t| (0..rows).map(|r| c.d.get(r, i) * mu[t * rows + r]).sum())
                    .collect()
            }
        }
    }

    /// `∇_{c_i} 𝓛 = P̄_i(P_b + Σ_j P̄_j c_j) + δc_i − 𝒟_iᵀμ + w_i λ`
    pub fn lagrangian_grad_block(&self, agg: &[S], c_i: &[S], mu: &[S], lambda: &[S], i: usize) -> Vec<S> {
        let mut g = self.objective_grad_block(agg, c_i, i);
        if self.ineq.is_some() {
            for (gt, v) in g.iter_mut().zip(self.lifted_tr_apply(i, mu)) {
                *gt -= v;
            }
        }
        if let Some(eq) = &self.eq {
            let w = eq.weights[i];
            for (gt, &l) in g.iter_mut().zip(lambda) {
                *gt += w * l;
            }
        }
        g
    }

    pub fn lagrangian_grad_primal(&self, c: &[S], mu: &[S], lambda: &[S], i: usize) -> Vec<S> {
        self.check_duals(mu, lambda);
        let agg = self.aggregate(c);
        self.lagrangian_grad_block(&agg, self.block(c, i), mu, lambda, i)
    }

    pub fn lagrangian_grad_primal_full(&self, c: &[S], mu: &[S], lambda: &[S]) -> Vec<S> {
        self.check_duals(mu, lambda);
        let agg = self.aggregate(c);
        (0..self.agents())
            .flat_map(|i| self.lagrangian_grad_block(&agg, self.block(c, i), mu, lambda, i))
            .collect()
    }

    /// `∇_μ 𝓛 = 𝒴_b − Σ_i 𝒟_i c_i`, the inequality residual.
    pub fn lagrangian_grad_dual(&self, c: &[S]) -> Vec<S> {
        let Some(cp) = &self.ineq else {
            return Vec::new();
        };
        let rows = cp.d.rows();
        let mut out = cp.y_b.clone();
        for t in 0..self.horizon {
            let c_t: Vec<S> = (0..self.agents()).map(|i| c[i * self.horizon + t]).collect();
            let dc = cp.d.mul_vec(&c_t);
            for r in 0..rows {
                out[t * rows + r] -= dc[r];
            }
        }
        out
    }

    /// `R(𝒞)`, the equality residual (`∇_λ 𝓛`).
    pub fn eq_residual(&self, c: &[S]) -> Vec<S> {
        let Some(eq) = &self.eq else {
            return Vec::new();
        };
        (0..self.horizon)
            .map(|t| {
                (0..self.agents())
                    .map(|i| eq.weights[i] * c[i * self.horizon + t])
                    .sum::<S>()
                    - eq.rhs[t]
            })
            .collect()
    }

    pub fn lagrangian(&self, c: &[S], mu: &[S], lambda: &[S]) -> S {
        self.check_duals(mu, lambda);
        let mut l = self.objective(c);
        for (m, g) in mu.iter().zip(self.lagrangian_grad_dual(c)) {
            l += *m * g;
        }
        for (m, r) in lambda.iter().zip(self.eq_residual(c)) {
            l += *m * r;
        }
        l
    }

    fn check_duals(&self, mu: &[S], lambda: &[S]) {
        assert_eq!(mu.len(), self.mu_len(), "mu length");
        assert_eq!(lambda.len(), self.lambda_len(), "lambda length");
    }

    /// Largest eigenvalue of `∇²F = MᵀM + δI` by power iteration.
    pub fn hessian_norm_estimate(&self) -> S {
        let s = self.agents();
        let t = self.horizon;
        let lmax = power_iteration(
            s * t,
            |v| {
                let agg: Vec<S> = (0..t)
                    .map(|k| (0..s).map(|i| self.pbar[i] * v[i * t + k]).sum())
                    .collect();
                (0..s * t)
                    .map(|j| self.pbar[j / t] * agg[j % t] + self.delta * v[j])
                    .collect()
            },
            10_000,
            S::of(1e-10),
        );
        lmax.max(self.delta)
    }

    /// Smallest eigenvalue of `MᵀM` (exactly `Σ P̄²` for one agent, 0 otherwise).
    pub fn aggregate_min_eigenvalue(&self) -> S {
        if self.agents() == 1 {
            self.pbar[0] * self.pbar[0]
        } else {
            S::zero()
        }
    }

    /// Certified strong-convexity modulus `δ + λ_min(MᵀM)`.
    pub fn strong_convexity(&self) -> S {
        self.delta + self.aggregate_min_eigenvalue()
    }

    /// Maximum violation of the coupling inequality (0 when satisfied).
    pub fn ineq_violation(&self, c: &[S]) -> S {
        self.lagrangian_grad_dual(c)
            .into_iter()
            .fold(S::zero(), |m, v| m.max(v))
    }

    pub fn split(&self, c: &[S]) -> Vec<Vec<S>> {
        (0..self.agents()).map(|i| self.block(c, i).to_vec()).collect()
    }

    /// Projection of every block onto its local set.
    pub fn project_all(&self, c: &[S]) -> Result<Vec<S>> {
        let mut out = Vec::with_capacity(c.len());
        for (i, set) in self.sets.iter().enumerate() {
            out.extend(set.project(self.block(c, i))?.into_inner());
        }
        Ok(out)
    }
}

/// Multipliers held by the operator. `μ ∈ [0, μ_max]`, `λ ∈ [−λ_max, λ_max]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState<S> {
    pub mu: Vec<S>,
    pub mu_max: S,
    pub lambda: Vec<S>,
    pub lambda_max: S,
}

impl<S: Scalar> DualState<S> {
    pub fn zeros(prob: &ValleyFillingProblem<S>, mu_max: S, lambda_max: S) -> Self {
        Self {
            mu: vec![S::zero(); prob.mu_len()],
            mu_max,
            lambda: vec![S::zero(); prob.lambda_len()],
            lambda_max,
        }
    }

    pub fn mu_saturated(&self) -> bool {
        self.mu.iter().any(|&m| m >= self.mu_max)
    }
}
