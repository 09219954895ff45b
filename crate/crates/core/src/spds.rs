//! Shrunken primal-dual subgradient solver running over the message bus.

use std::sync::Arc;

use serde::Serialize;

use crate::attacks::{install_attacks, AttackSpec};
use crate::comms::{AgentNode, Broadcast, CouplingData, LogLevel, MessageBus, OperatorNode};
use crate::error::{Error, Result};
use crate::fleet::FeasibleSet;
use crate::linalg::dist2;
use crate::netmodel::{nodal_voltages, InjectionModel};
use crate::problem::{DualState, ValleyFillingProblem};
use crate::scalar::Scalar;

/// `a₀ / (1 + k·a₁)`
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepSchedule<S> {
    pub a0: S,
    pub a1: S,
}

impl<S: Scalar> StepSchedule<S> {
    pub fn at(&self, k: usize) -> S {
        self.a0 / (S::one() + S::from_usize(k).unwrap() * self.a1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpdsConfig<S> {
    pub tau_c: S,
    pub tau_mu: S,
    /// `None` derives `a₀ = 1/L̂` from the problem.
    pub alpha: Option<StepSchedule<S>>,
    /// `None` uses `b₀ = 0.1·a₀` with the primal decay rate.
    pub beta: Option<StepSchedule<S>>,
    pub decay: S,
    /// `None` uses `1e-4·√(sT)`.
    pub eps: Option<S>,
    pub max_iter: usize,
    pub mu_max: S,
    pub lambda_max: S,
    /// Also require `‖μ^{(k+1)} − μ^{(k)}‖ ≤ this` before declaring convergence.
    pub dual_eps: Option<S>,
    /// Keep 𝒞 and μ for every iteration in the trace.
    pub record_states: bool,
    pub injection: InjectionMode,
}

impl<S: Scalar> Default for SpdsConfig<S> {
    fn default() -> Self {
        Self {
            tau_c: S::of(0.99),
            tau_mu: S::of(0.99),
            alpha: None,
            beta: None,
            decay: S::of(1e-3),
            eps: None,
            max_iter: 50_000,
            mu_max: S::of(1e4),
            lambda_max: S::of(1e4),
            dual_eps: None,
            record_states: false,
            injection: InjectionMode::Damped,
        }
    }
}

impl<S: Scalar> SpdsConfig<S> {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: S, name: &str| {
            if v > S::zero() && v <= S::one() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")))
            }
        };
        unit(self.tau_c, "tau_c")?;
        unit(self.tau_mu, "tau_mu")?;
        for (s, name) in [(self.alpha, "alpha"), (self.beta, "beta")] {
            if let Some(s) = s {
                if !(s.a0 > S::zero()) || s.a1 < S::zero() {
                    return Err(Error::Config(format!("{name} schedule needs a0 > 0 and a1 >= 0")));
                }
            }
        }
        if let Some(e) = self.eps {
            if !(e > S::zero()) {
                return Err(Error::Config("eps must be positive".into()));
            }
        }
        if self.decay < S::zero() {
            return Err(Error::Config("decay must be nonnegative".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("max_iter must be positive".into()));
        }
        if !(self.mu_max > S::zero()) || !(self.lambda_max > S::zero()) {
            return Err(Error::Config("multiplier bounds must be positive".into()));
        }
        Ok(())
    }

    pub fn eps_for(&self, prob: &ValleyFillingProblem<S>) -> S {
        self.eps
            .unwrap_or_else(|| S::of(1e-4) * S::from_usize(prob.dim()).unwrap().sqrt())
    }

    pub fn primal_schedule(&self, prob: &ValleyFillingProblem<S>) -> StepSchedule<S> {
        self.alpha.unwrap_or_else(|| StepSchedule {
            a0: S::one() / prob.hessian_norm_estimate(),
            a1: self.decay,
        })
    }

    pub fn dual_schedule(&self, prob: &ValleyFillingProblem<S>) -> StepSchedule<S> {
        self.beta.unwrap_or_else(|| {
            let a = self.primal_schedule(prob);
            StepSchedule {
                a0: S::of(0.1) * a.a0,
                a1: self.decay,
            }
        })
    }
}

/// `Π_ℂ((1/τ)·Π_ℂ(τ·c − α·grad))`
pub fn primal_update<S: Scalar>(set: &FeasibleSet<S>, c: &[S], grad: &[S], alpha: S, tau: S) -> Result<Vec<S>> {
    let inner: Vec<S> = c.iter().zip(grad).map(|(&x, &g)| tau * x - alpha * g).collect();
    let p = set.project(&inner)?;
    let outer: Vec<S> = p.iter().map(|&x| x / tau).collect();
    Ok(set.project(&outer)?.into_inner())
}

/// `Π_𝔻((1/τ)·Π_𝔻(τ·μ + β·grad))` with `𝔻 = [lo, hi]^n`.
pub fn dual_update<S: Scalar>(mu: &[S], grad: &[S], beta: S, tau: S, lo: S, hi: S) -> Vec<S> {
    let clamp = |v: S| v.max(lo).min(hi);
    mu.iter()
        .zip(grad)
        .map(|(&m, &g)| clamp(clamp(tau * m + beta * g) / tau))
        .collect()
}

/// How an agent-side quadratic goal enters the primal step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// `ω∇g(c^{(k)})` is added to the received gradient.
    Explicit,
    /// Same gradient, plus a damping term `½(x − x̃)ᵀ(αH)(x − x̃)` on the
    /// inner projection, `x̃` being the previous inner point and `H` the
    /// goal's diagonal Hessian. The term vanishes at fixed points and keeps
    /// the step stable for very large reshape weights.
    #[default]
    Damped,
}

/// What a hook contributes to one primal step.
#[derive(Debug, Clone, PartialEq)]
pub enum PrimalInjection<S> {
    /// Added to the gradient.
    Gradient(Vec<S>),
    /// Added to the gradient, with the diagonal Hessian used for damping.
    Damped { gradient: Vec<S>, curvature: Vec<S> },
}

/// Agent-side perturbation of the received gradient.
pub trait PrimalHook<S>: Send {
    fn attack_index(&self) -> usize;
    /// Called once per round with the agent's current profile and the
    /// residual it observed on its broadcast.
    fn perturbation(&mut self, round: usize, c: &[S], observed_residual: S) -> Option<PrimalInjection<S>>;
    fn last_injection_norm(&self) -> f64;
    fn gate_open(&self) -> Option<bool> {
        None
    }
}

/// Damped shrunken primal step:
/// `x = argmin_{x∈ℂ} ½‖x − (τc − α·grad)‖² + ½(x − x̃)ᵀ diag(α·H) (x − x̃)`,
/// then `Π_ℂ(x/τ)`. Returns the new profile and the inner point `x`.
pub fn primal_update_damped<S: Scalar>(
    set: &FeasibleSet<S>,
    c: &[S],
    grad: &[S],
    curvature: &[S],
    prev_inner: &[S],
    alpha: S,
    tau: S,
) -> Result<(Vec<S>, Vec<S>)> {
    let q: Vec<S> = curvature.iter().map(|&h| alpha * h).collect();
    let target: Vec<S> = (0..c.len())
        .map(|t| tau * c[t] - alpha * grad[t] + q[t] * prev_inner[t])
        .collect();
    let x = set.prox_diag_quadratic(&target, &q)?.into_inner();
    let outer: Vec<S> = x.iter().map(|&v| v / tau).collect();
    Ok((set.project(&outer)?.into_inner(), x))
}

pub struct SpdsAgent<S> {
    set: FeasibleSet<S>,
    c: Vec<S>,
    prev_inner: Option<Vec<S>>,
    tau: S,
    alpha: StepSchedule<S>,
    hooks: Vec<Box<dyn PrimalHook<S>>>,
}

impl<S: Scalar> SpdsAgent<S> {
    pub fn new(set: FeasibleSet<S>, c0: Vec<S>, tau: S, alpha: StepSchedule<S>) -> Self {
        Self {
            set,
            c: c0,
            prev_inner: None,
            tau,
            alpha,
            hooks: Vec::new(),
        }
    }

    pub fn add_hook(&mut self, hook: Box<dyn PrimalHook<S>>) {
        self.hooks.push(hook);
    }

    pub fn profile(&self) -> &[S] {
        &self.c
    }

    pub fn hooks(&self) -> &[Box<dyn PrimalHook<S>>] {
        &self.hooks
    }
}

impl<S: Scalar> AgentNode<S> for SpdsAgent<S> {
    fn report(&self) -> Vec<S> {
        self.c.clone()
    }

    fn update(&mut self, round: usize, b: &Broadcast<S>) -> Result<()> {
        let mut grad = b.gradient.clone();
        let mut curvature: Option<Vec<S>> = None;
        for hook in &mut self.hooks {
            let gradient = match hook.perturbation(round, &self.c, b.residual) {
                Some(PrimalInjection::Gradient(p)) => p,
                Some(PrimalInjection::Damped { gradient, curvature: h }) => {
                    let acc = curvature.get_or_insert_with(|| vec![S::zero(); h.len()]);
                    for (a, v) in acc.iter_mut().zip(h) {
                        *a += v;
                    }
                    gradient
                }
                None => continue,
            };
            for (g, v) in grad.iter_mut().zip(gradient) {
                *g += v;
            }
        }
        let alpha = self.alpha.at(round - 1);
        match &curvature {
            Some(h) => {
                let prev = match self.prev_inner.take() {
                    Some(p) => p,
                    None => self.c.iter().map(|&v| self.tau * v).collect(),
                };
                let (c, x) = primal_update_damped(&self.set, &self.c, &grad, h, &prev, alpha, self.tau)?;
                self.c = c;
                self.prev_inner = Some(x);
            }
            None => {
                self.c = primal_update(&self.set, &self.c, &grad, alpha, self.tau)?;
                self.prev_inner = None;
            }
        }
        Ok(())
    }
}

pub struct SpdsOperator<S> {
    prob: Arc<ValleyFillingProblem<S>>,
    duals: DualState<S>,
    tau: S,
    beta: StepSchedule<S>,
    prev: Option<Vec<S>>,
    last_residual: S,
    last_dual_change: S,
}

impl<S: Scalar> SpdsOperator<S> {
    pub fn new(prob: Arc<ValleyFillingProblem<S>>, duals: DualState<S>, tau: S, beta: StepSchedule<S>) -> Self {
        Self {
            prob,
            duals,
            tau,
            beta,
            prev: None,
            last_residual: S::infinity(),
            last_dual_change: S::infinity(),
        }
    }

    pub fn duals(&self) -> &DualState<S> {
        &self.duals
    }

    pub fn last_dual_change(&self) -> S {
        self.last_dual_change
    }
}

impl<S: Scalar> OperatorNode<S> for SpdsOperator<S> {
    fn mu(&self) -> &[S] {
        &self.duals.mu
    }

    fn lambda(&self) -> &[S] {
        &self.duals.lambda
    }

    fn last_residual(&self) -> S {
        self.last_residual
    }

    fn coupling_template(&self) -> CouplingData<S> {
        CouplingData::zeros(self.prob.dim(), self.prob.lambda_len())
    }

    fn operate(&mut self, round: usize, reports: &[Vec<S>], coupling: &CouplingData<S>) -> Result<Vec<Broadcast<S>>> {
        let prob = &self.prob;
        let t_len = prob.horizon();
        if reports.len() != prob.agents() {
            return Err(Error::Protocol {
                round,
                detail: format!("{} reports for {} agents", reports.len(), prob.agents()),
            });
        }
        let mut stacked = Vec::with_capacity(prob.dim());
        for (i, r) in reports.iter().enumerate() {
            if r.len() != t_len {
                return Err(Error::Protocol {
                    round,
                    detail: format!("report of agent {i} has length {}", r.len()),
                });
            }
            stacked.extend_from_slice(r);
        }
        if let Some(prev) = &self.prev {
            self.last_residual = dist2(&stacked, prev);
        }
        let agg = prob.aggregate(&stacked);
        let mu = &self.duals.mu;
        let lambda = &self.duals.lambda;
        let broadcasts: Vec<Broadcast<S>> = (0..prob.agents())
            .map(|i| {
                let mut g = prob.lagrangian_grad_block(&agg, &reports[i], mu, lambda, i);
                for (gt, &e) in g.iter_mut().zip(&coupling.primal_grad[i * t_len..(i + 1) * t_len]) {
                    *gt += e;
                }
                Broadcast {
                    gradient: g,
                    mu: mu.clone(),
                    lambda: lambda.clone(),
                    residual: self.last_residual,
                }
            })
            .collect();

        let beta = self.beta.at(round - 1);
        let g_mu = prob.lagrangian_grad_dual(&stacked);
        let mu_next = dual_update(mu, &g_mu, beta, self.tau, S::zero(), self.duals.mu_max);
        let mut g_lambda = prob.eq_residual(&stacked);
        for (g, &e) in g_lambda.iter_mut().zip(&coupling.dual_grad) {
            *g += e;
        }
        let lmax = self.duals.lambda_max;
        let lambda_next = dual_update(lambda, &g_lambda, beta, self.tau, -lmax, lmax);
        let change = dist2(&mu_next, mu).hypot(dist2(&lambda_next, lambda));
        self.last_dual_change = change;
        self.duals.mu = mu_next;
        self.duals.lambda = lambda_next;
        self.prev = Some(stacked);
        Ok(broadcasts)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackActivity {
    pub injection_norm: f64,
    /// `None` for attacks without a stealth gate.
    pub gate_open: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 1-based iteration index; row `k` describes `𝒞^{(k)}`.
    pub k: usize,
    /// `‖𝒞^{(k)} − 𝒞^{(k−1)}‖₂`
    pub residual: f64,
    pub objective: f64,
    pub min_voltage_pu: Option<f64>,
    pub dual_change: f64,
    pub attacks: Vec<AttackActivity>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    /// Stacked `𝒞^{(k)}` and `μ^{(k)}` per row when state recording is on.
    pub states: Vec<(Vec<f64>, Vec<f64>)>,
}

impl IterationTrace {
    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        let n_att = self.records.first().map_or(0, |r| r.attacks.len());
        write!(w, "iteration,residual,objective,min_voltage_pu,dual_change")?;
        for a in 0..n_att {
            write!(w, ",attack{a}_injection_norm,attack{a}_gate")?;
        }
        writeln!(w)?;
        for r in &self.records {
            write!(
                w,
                "{},{:e},{:e},{},{:e}",
                r.k,
                r.residual,
                r.objective,
                r.min_voltage_pu.map_or(String::new(), |v| format!("{v:.9}")),
                r.dual_change
            )?;
            for a in &r.attacks {
                let gate = match a.gate_open {
                    None => "",
                    Some(true) => "open",
                    Some(false) => "closed",
                };
                write!(w, ",{:e},{gate}", a.injection_norm)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

pub struct SpdsOutcome<S> {
    pub solution: Vec<S>,
    pub duals: DualState<S>,
    pub trace: IterationTrace,
    pub converged: bool,
    pub iterations: usize,
    pub eps: S,
    /// Payload rewrites per (tap owner, channel).
    pub mutations: Vec<((usize, crate::comms::Channel), u64)>,
}

/// Run-time options that do not change the algorithm.
#[derive(Default)]
pub struct RunOptions<'a, S> {
    pub voltages: Option<&'a InjectionModel<S>>,
    pub log: Option<(LogLevel, Box<dyn std::io::Write + Send>)>,
    pub initial: Option<Vec<S>>,
}

fn min_voltage<S: Scalar>(inj: &InjectionModel<S>, c: &[S], t_len: usize) -> Result<f64> {
    let s = inj.agents();
    let mut vmin = f64::INFINITY;
    for t in 0..t_len {
        let c_t: Vec<S> = (0..s).map(|i| c[i * t_len + t]).collect();
        for v in nodal_voltages(inj, &c_t, t)? {
            vmin = vmin.min(v.to_f64_lossy().max(0.0).sqrt());
        }
    }
    Ok(vmin)
}

/// Initial profile: the projection of the zero schedule.
pub fn initial_profile<S: Scalar>(prob: &ValleyFillingProblem<S>) -> Result<Vec<S>> {
    prob.project_all(&vec![S::zero(); prob.dim()])
}

/// Runs SPDS over the message bus with the given attacks installed.
/// Hitting `max_iter` is reported through `converged = false`, not an error.
pub fn run<S: Scalar + Serialize>(
    prob: &ValleyFillingProblem<S>,
    cfg: &SpdsConfig<S>,
    attacks: &[AttackSpec<S>],
    opts: RunOptions<'_, S>,
) -> Result<SpdsOutcome<S>> {
    cfg.validate()?;
    let prob = Arc::new(prob.clone());
    let eps = cfg.eps_for(&prob);
    let alpha = cfg.primal_schedule(&prob);
    let beta = cfg.dual_schedule(&prob);
    let c0 = match opts.initial {
        Some(c) => {
            if c.len() != prob.dim() {
                return Err(Error::Dimension {
                    context: "initial profile",
                    expected: prob.dim(),
                    got: c.len(),
                });
            }
            prob.project_all(&c)?
        }
        None => initial_profile(&prob)?,
    };
    let t_len = prob.horizon();
    let mut agents: Vec<SpdsAgent<S>> = prob
        .sets()
        .iter()
        .enumerate()
        .map(|(i, set)| SpdsAgent::new(set.clone(), c0[i * t_len..(i + 1) * t_len].to_vec(), cfg.tau_c, alpha))
        .collect();
    let mut operator = SpdsOperator::new(
        prob.clone(),
        DualState::zeros(&prob, cfg.mu_max, cfg.lambda_max),
        cfg.tau_mu,
        beta,
    );
    let mut bus = MessageBus::new(prob.agents());
    if let Some((level, sink)) = opts.log {
        bus = bus.with_log_sink(level, sink);
    }
    let n_attacks = attacks.len();
    let eps_f = eps.to_f64_lossy();
    install_attacks(attacks, &prob, eps, cfg.injection, &mut agents, &mut bus)?;

    let mut trace = IterationTrace::default();
    let mut current = c0;
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=cfg.max_iter {
        bus.run_round(k, &mut agents, &mut operator)?;
        let next: Vec<S> = agents.iter().flat_map(|a| a.profile().iter().copied()).collect();
        let residual = dist2(&next, &current).to_f64_lossy();
        let mut activity = vec![
            AttackActivity {
                injection_norm: 0.0,
                gate_open: None,
            };
            n_attacks
        ];
        let mut sq = vec![0.0; n_attacks];
        for agent in &agents {
            for h in agent.hooks() {
                let a = h.attack_index();
                sq[a] += h.last_injection_norm().powi(2);
                merge_gate(&mut activity[a].gate_open, h.gate_open());
            }
        }
        for (a, norm, gate) in bus.tap_activity() {
            sq[a] += norm * norm;
            merge_gate(&mut activity[a].gate_open, gate);
        }
        for (act, s) in activity.iter_mut().zip(&sq) {
            act.injection_norm = s.sqrt();
        }
        let min_voltage_pu = match opts.voltages {
            Some(inj) => Some(min_voltage(inj, &next, t_len)?),
            None => None,
        };
        let dual_change = operator.last_dual_change().to_f64_lossy();
        trace.records.push(IterationRecord {
            k,
            residual,
            objective: prob.objective(&next).to_f64_lossy(),
            min_voltage_pu,
            dual_change,
            attacks: activity,
        });
        if cfg.record_states {
            trace.states.push((
                next.iter().map(|v| v.to_f64_lossy()).collect(),
                operator.duals().mu.iter().map(|v| v.to_f64_lossy()).collect(),
            ));
        }
        current = next;
        iterations = k;
        let dual_ok = cfg.dual_eps.map_or(true, |d| dual_change <= d.to_f64_lossy());
        if residual <= eps_f && dual_ok {
            converged = true;
            break;
        }
    }
    bus.flush()?;
    Ok(SpdsOutcome {
        solution: current,
        duals: operator.duals().clone(),
        trace,
        converged,
        iterations,
        eps,
        mutations: bus.mutations().iter().map(|(k, v)| (*k, *v)).collect(),
    })
}

fn merge_gate(acc: &mut Option<bool>, g: Option<bool>) {
    if let Some(g) = g {
        *acc = Some(acc.unwrap_or(false) || g);
    }
}

/// Plain in-memory SPDS without bus, taps or hooks.
pub fn run_in_memory<S: Scalar>(prob: &ValleyFillingProblem<S>, cfg: &SpdsConfig<S>) -> Result<(Vec<S>, DualState<S>, usize, bool)> {
    cfg.validate()?;
    let eps = cfg.eps_for(prob);
    let alpha = cfg.primal_schedule(prob);
    let beta = cfg.dual_schedule(prob);
    let t_len = prob.horizon();
    let mut c = initial_profile(prob)?;
    let mut duals = DualState::zeros(prob, cfg.mu_max, cfg.lambda_max);
    for k in 1..=cfg.max_iter {
        let agg = prob.aggregate(&c);
        let mut next = Vec::with_capacity(c.len());
        for (i, set) in prob.sets().iter().enumerate() {
            let ci = &c[i * t_len..(i + 1) * t_len];
            let g = prob.lagrangian_grad_block(&agg, ci, &duals.mu, &duals.lambda, i);
            next.extend(primal_update(set, ci, &g, alpha.at(k - 1), cfg.tau_c)?);
        }
        let b = beta.at(k - 1);
        let prev_mu = duals.mu.clone();
        let prev_lambda = duals.lambda.clone();
        let g_mu = prob.lagrangian_grad_dual(&c);
        duals.mu = dual_update(&duals.mu, &g_mu, b, cfg.tau_mu, S::zero(), cfg.mu_max);
        let g_l = prob.eq_residual(&c);
        duals.lambda = dual_update(&duals.lambda, &g_l, b, cfg.tau_mu, -cfg.lambda_max, cfg.lambda_max);
        let r = dist2(&next, &c);
        c = next;
        let change = dist2(&duals.mu, &prev_mu).hypot(dist2(&duals.lambda, &prev_lambda));
        let dual_ok = cfg.dual_eps.map_or(true, |d| change <= d);
        if r <= eps && dual_ok {
            return Ok((c, duals, k, true));
        }
    }
    Ok((c, duals, cfg.max_iter, false))
}
