//! Gradient-injection attacks: agent-side primal perturbations, the stealth
//! gate, and dual attacks realized as taps on the message bus.

use std::collections::BTreeSet;

use crate::comms::{Channel, ChannelTap, Direction, MessageBus, Payload, TapContext};
use crate::error::{Error, Result};
use crate::linalg::norm2;
use crate::problem::ValleyFillingProblem;
use crate::reference::DiagQuadratic;
use crate::scalar::Scalar;
use crate::spds::{PrimalInjection, InjectionMode, PrimalHook, SpdsAgent};

/// Quadratic goal `g(c) = ‖diag(a)·c‖²` of an attacker.
#[derive(Debug, Clone, PartialEq)]
pub enum GoalSpec<S> {
    /// `a = 1`: penalizes charging peaks.
    Smooth,
    TimeTuning { theta: Vec<usize>, m: S, big_m: S },
    BatteryDamage { t_f: usize, m: S, big_m: S },
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttackSpec<S> {
    SmoothCharging {
        attacker: usize,
        omega: S,
    },
    /// `theta` holds 1-based preferred slots.
    TimeTuning {
        attacker: usize,
        omega: S,
        theta: Vec<usize>,
        m: S,
        big_m: S,
    },
    BatteryDamage {
        victims: Vec<usize>,
        omega: S,
        t_f: usize,
        m: S,
        big_m: S,
    },
    /// `eps_s = None` uses ten times the convergence threshold.
    Stealthy {
        inner: Box<AttackSpec<S>>,
        eps_s: Option<S>,
    },
    DualFull {
        attacker: usize,
        goal: GoalSpec<S>,
        omega: S,
    },
    /// `goal` fixes the attacker's target profile, the minimizer of the
    /// goal over its own local set.
    DualPowerBalance {
        attacker: usize,
        victims: Vec<usize>,
        omega: S,
        goal: GoalSpec<S>,
        eps_s: Option<S>,
    },
}

/// Diagonal weights of a reshape goal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReshapeMatrix<S> {
    pub diag: Vec<S>,
}

impl<S: Scalar> ReshapeMatrix<S> {
    pub fn identity(t_len: usize) -> Self {
        Self {
            diag: vec![S::one(); t_len],
        }
    }

    /// `‖diag·c‖²`
    pub fn goal(&self, c: &[S]) -> S {
        self.diag.iter().zip(c).map(|(&a, &x)| a * a * x * x).sum()
    }

    /// `2·diag²·c`
    pub fn goal_grad(&self, c: &[S]) -> Vec<S> {
        self.diag.iter().zip(c).map(|(&a, &x)| S::two() * a * a * x).collect()
    }

    /// Lipschitz constant of the goal gradient, `2·max(diag)²`.
    pub fn lipschitz(&self) -> S {
        let m = self.diag.iter().fold(S::zero(), |m, &a| m.max(a.abs()));
        S::two() * m * m
    }
}

fn check_weights<S: Scalar>(m: S, big_m: S) -> Result<()> {
    if !(m > S::zero()) || !(big_m > m) || !big_m.is_finite() {
        return Err(Error::InvalidAttack(format!(
            "reshape weights need 0 < m < M < inf, got m = {m}, M = {big_m}"
        )));
    }
    Ok(())
}

/// `A[t̂] = m` for `t̂ ∈ Θ` (1-based), `M` elsewhere.
pub fn time_tuning_matrix<S: Scalar>(theta: &[usize], m: S, big_m: S, t_len: usize) -> Result<ReshapeMatrix<S>> {
    check_weights(m, big_m)?;
    if theta.is_empty() {
        return Err(Error::InvalidAttack("preferred slot set is empty".into()));
    }
    if let Some(&bad) = theta.iter().find(|&&t| t == 0 || t > t_len) {
        return Err(Error::InvalidAttack(format!("preferred slot {bad} outside 1..={t_len}")));
    }
    let mut diag = vec![big_m; t_len];
    for &t in theta {
        diag[t - 1] = m;
    }
    Ok(ReshapeMatrix { diag })
}

/// `Â[t̂] = m` when `t̂` (1-based) is a multiple of `t_f`, `M` elsewhere.
pub fn battery_damage_matrix<S: Scalar>(t_f: usize, m: S, big_m: S, t_len: usize) -> Result<ReshapeMatrix<S>> {
    check_weights(m, big_m)?;
    if t_f == 0 {
        return Err(Error::InvalidAttack("oscillation period must be at least 1".into()));
    }
    Ok(ReshapeMatrix {
        diag: (1..=t_len).map(|t| if t % t_f == 0 { m } else { big_m }).collect(),
    })
}

impl<S: Scalar> GoalSpec<S> {
    pub fn matrix(&self, t_len: usize) -> Result<ReshapeMatrix<S>> {
        match self {
            GoalSpec::Smooth => Ok(ReshapeMatrix::identity(t_len)),
            GoalSpec::TimeTuning { theta, m, big_m } => time_tuning_matrix(theta, *m, *big_m, t_len),
            GoalSpec::BatteryDamage { t_f, m, big_m } => battery_damage_matrix(*t_f, *m, *big_m, t_len),
        }
    }
}

/// Latched activation on the observed residual.
#[derive(Debug, Clone, PartialEq)]
pub struct StealthGate<S> {
    pub eps_s: S,
    open: bool,
    activation: Option<usize>,
}

impl<S: Scalar> StealthGate<S> {
    pub fn new(eps_s: S) -> Self {
        Self {
            eps_s,
            open: false,
            activation: None,
        }
    }

    /// At round `k` the attacker sees the residual of iteration `k − 1`.
    /// Opens, for good, once that residual is at most `eps_s`; the
    /// activation iteration is then `k − 1`. A zero threshold never opens.
    pub fn observe(&mut self, round: usize, residual: S) -> bool {
        if !self.open && self.eps_s > S::zero() && residual <= self.eps_s {
            self.open = true;
            self.activation = Some(round.saturating_sub(1));
        }
        self.open
    }

    pub fn is_open(&self) -> bool {
        self.open
    }

    /// Iteration whose residual opened the gate.
    pub fn activation(&self) -> Option<usize> {
        self.activation
    }
}

/// First iteration (1-based) of a recorded residual sequence at or below
/// `eps_s`, the round a gate replaying that sequence would activate at.
pub fn predicted_activation(residuals: &[f64], eps_s: f64) -> Option<usize> {
    if eps_s <= 0.0 {
        return None;
    }
    if eps_s == f64::INFINITY {
        return Some(0);
    }
    residuals.iter().position(|&r| r <= eps_s).map(|i| i + 1)
}

/// `ω·∇g(c)` for a reshape goal, optionally behind a stealth gate.
pub struct ReshapeHook<S> {
    index: usize,
    omega: S,
    matrix: ReshapeMatrix<S>,
    gate: Option<StealthGate<S>>,
    mode: InjectionMode,
    last_norm: f64,
}

impl<S: Scalar> ReshapeHook<S> {
    pub fn new(index: usize, omega: S, matrix: ReshapeMatrix<S>, gate: Option<StealthGate<S>>, mode: InjectionMode) -> Self {
        Self {
            index,
            omega,
            matrix,
            gate,
            mode,
            last_norm: 0.0,
        }
    }

    /// Injection without gating: `2ω·diag²·c`.
    pub fn injection(&self, c: &[S]) -> Vec<S> {
        self.matrix.goal_grad(c).into_iter().map(|g| self.omega * g).collect()
    }
}

impl<S: Scalar> PrimalHook<S> for ReshapeHook<S> {
    fn attack_index(&self) -> usize {
        self.index
    }

    fn perturbation(&mut self, round: usize, c: &[S], observed_residual: S) -> Option<PrimalInjection<S>> {
        self.last_norm = 0.0;
        if let Some(g) = self.gate.as_mut() {
            if !g.observe(round, observed_residual) {
                return None;
            }
        }
        let p = self.injection(c);
        self.last_norm = norm2(&p).to_f64_lossy();
        match self.mode {
            InjectionMode::Explicit => Some(PrimalInjection::Gradient(p)),
            InjectionMode::Damped => Some(PrimalInjection::Damped {
                gradient: p,
                curvature: self.matrix.diag.iter().map(|&a| S::two() * self.omega * a * a).collect(),
            }),
        }
    }

    fn last_injection_norm(&self) -> f64 {
        self.last_norm
    }

    fn gate_open(&self) -> Option<bool> {
        self.gate.as_ref().map(|g| g.is_open())
    }
}

/// Falsification of the operator's equality-coupling data so that
/// `λᵀΦ = ω·g(c_i)`.
pub struct DualFullTap<S> {
    index: usize,
    attacker: usize,
    horizon: usize,
    omega: S,
    matrix: ReshapeMatrix<S>,
    gate: Option<StealthGate<S>>,
    last_norm: f64,
}

/// `Φ = (ω/‖λ‖²)·g·λ`, or zero at `λ = 0`.
pub fn full_falsification<S: Scalar>(omega: S, g: S, lambda: &[S]) -> Vec<S> {
    let n2: S = lambda.iter().map(|&l| l * l).sum();
    if n2 == S::zero() {
        return vec![S::zero(); lambda.len()];
    }
    lambda.iter().map(|&l| omega / n2 * g * l).collect()
}

/// `∇_λ(λᵀΦ) = Φ + J_λ(Φ)ᵀλ` for the falsification above.
pub fn full_falsification_dual_grad<S: Scalar>(omega: S, g: S, lambda: &[S]) -> Vec<S> {
    let n2: S = lambda.iter().map(|&l| l * l).sum();
    if n2 == S::zero() {
        return vec![S::zero(); lambda.len()];
    }
    let phi = full_falsification(omega, g, lambda);
    // J = ω·g·(I/‖λ‖² − 2λλᵀ/‖λ‖⁴), symmetric.
    lambda
        .iter()
        .zip(&phi)
        .map(|(&l, &p)| p + omega * g * (l / n2 - S::two() * l * n2 / (n2 * n2)))
        .collect()
}

impl<S: Scalar> ChannelTap<S> for DualFullTap<S> {
    fn on_message(&mut self, ctx: &TapContext<'_, S>, payload: &mut Payload<S>) -> Result<()> {
        let Payload::Coupling(data) = payload else {
            return Ok(());
        };
        if let Some(g) = self.gate.as_mut() {
            if !g.observe(ctx.round, ctx.residual) {
                self.last_norm = 0.0;
                return Ok(());
            }
        }
        let c_i = &ctx.reports[self.attacker];
        let g = self.matrix.goal(c_i);
        let lambda = ctx.lambda;
        let n2: S = lambda.iter().map(|&l| l * l).sum();
        if n2 == S::zero() {
            self.last_norm = 0.0;
            return Ok(());
        }
        for (d, p) in data.phi.iter_mut().zip(full_falsification(self.omega, g, lambda)) {
            *d += p;
        }
        for (d, p) in data
            .dual_grad
            .iter_mut()
            .zip(full_falsification_dual_grad(self.omega, g, lambda))
        {
            *d += p;
        }
        // ∇_{c_i}(λᵀΦ) = (ω·λᵀλ/‖λ‖²)·∇g(c_i)
        let scale = self.omega * n2 / n2;
        let block = &mut data.primal_grad[self.attacker * self.horizon..(self.attacker + 1) * self.horizon];
        let grad: Vec<S> = self.matrix.goal_grad(c_i).into_iter().map(|v| scale * v).collect();
        for (d, v) in block.iter_mut().zip(&grad) {
            *d += *v;
        }
        self.last_norm = norm2(&grad).to_f64_lossy();
        Ok(())
    }

    fn attack_index(&self) -> Option<usize> {
        Some(self.index)
    }

    fn last_injection_norm(&self) -> f64 {
        self.last_norm
    }

    fn gate_open(&self) -> Option<bool> {
        self.gate.as_ref().map(|g| g.is_open())
    }
}

/// Rewrites one victim's downlink gradient with the gradient of
/// `ω‖c̄ − Σ_v r_v c_v‖²`, `r_v = P̄_v/P̄_i`. `c̄` is the attacker-bus load
/// (in units of the attacker's rating) wiretapped when the gate opened,
/// minus the attacker's target profile: the share the victims must carry
/// for the attacker to land on its target.
pub struct PowerBalanceTap<S> {
    index: usize,
    attacker: usize,
    victim: usize,
    victims: Vec<usize>,
    ratios: Vec<S>,
    target: Vec<S>,
    omega: S,
    gate: StealthGate<S>,
    snapshot: Option<Vec<S>>,
    last_norm: f64,
}

impl<S: Scalar> PowerBalanceTap<S> {
    pub fn snapshot(&self) -> Option<&[S]> {
        self.snapshot.as_deref()
    }
}

/// `Σ_v r_v c_v` over the victims' reported profiles.
fn weighted_victim_load<S: Scalar>(reports: &[Vec<S>], victims: &[usize], ratios: &[S], t_len: usize) -> Vec<S> {
    let mut out = vec![S::zero(); t_len];
    for (&v, &r) in victims.iter().zip(ratios) {
        for (o, &x) in out.iter_mut().zip(&reports[v]) {
            *o += r * x;
        }
    }
    out
}

impl<S: Scalar> ChannelTap<S> for PowerBalanceTap<S> {
    fn on_message(&mut self, ctx: &TapContext<'_, S>, payload: &mut Payload<S>) -> Result<()> {
        let Payload::Broadcast(b) = payload else {
            return Ok(());
        };
        if !self.gate.observe(ctx.round, ctx.residual) {
            self.last_norm = 0.0;
            return Ok(());
        }
        let t_len = b.gradient.len();
        if self.snapshot.is_none() {
            let victim_load = weighted_victim_load(ctx.reports, &self.victims, &self.ratios, t_len);
            self.snapshot = Some(
                (0..t_len)
                    .map(|t| ctx.reports[self.attacker][t] + victim_load[t] - self.target[t])
                    .collect(),
            );
        }
        let c_bar = self.snapshot.as_ref().expect("snapshot set above");
        let load = weighted_victim_load(ctx.reports, &self.victims, &self.ratios, t_len);
        let pos = self.victims.iter().position(|&v| v == self.victim).expect("victim listed");
        let r = self.ratios[pos];
        let grad: Vec<S> = c_bar
            .iter()
            .zip(&load)
            .map(|(&cb, &l)| -S::two() * self.omega * r * (cb - l))
            .collect();
        for (g, d) in b.gradient.iter_mut().zip(&grad) {
            *g += *d;
        }
        self.last_norm = norm2(&grad).to_f64_lossy();
        Ok(())
    }

    fn attack_index(&self) -> Option<usize> {
        Some(self.index)
    }

    fn last_injection_norm(&self) -> f64 {
        self.last_norm
    }

    fn gate_open(&self) -> Option<bool> {
        Some(self.gate.is_open())
    }
}

fn check_omega<S: Scalar>(omega: S) -> Result<()> {
    if omega > S::zero() && omega.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidAttack(format!("omega must be positive and finite, got {omega}")))
    }
}

fn check_agent(agent: usize, agents: usize) -> Result<()> {
    if agent < agents {
        Ok(())
    } else {
        Err(Error::InvalidAttack(format!("agent {agent} does not exist ({agents} agents)")))
    }
}

fn check_victims(victims: &[usize], agents: usize) -> Result<()> {
    let mut seen = BTreeSet::new();
    for &v in victims {
        check_agent(v, agents)?;
        if !seen.insert(v) {
            return Err(Error::InvalidAttack(format!("victim {v} listed twice")));
        }
    }
    Ok(())
}

fn check_eps_s<S: Scalar>(eps_s: Option<S>) -> Result<()> {
    match eps_s {
        Some(e) if !(e >= S::zero()) => Err(Error::InvalidAttack(format!("stealth threshold must be >= 0, got {e}"))),
        _ => Ok(()),
    }
}

impl<S: Scalar> AttackSpec<S> {
    pub fn validate(&self, prob: &ValleyFillingProblem<S>) -> Result<()> {
        let s = prob.agents();
        let t_len = prob.horizon();
        match self {
            AttackSpec::SmoothCharging { attacker, omega } => {
                check_omega(*omega)?;
                check_agent(*attacker, s)
            }
            AttackSpec::TimeTuning {
                attacker,
                omega,
                theta,
                m,
                big_m,
            } => {
                check_omega(*omega)?;
                check_agent(*attacker, s)?;
                time_tuning_matrix(theta, *m, *big_m, t_len).map(|_| ())
            }
            AttackSpec::BatteryDamage {
                victims,
                omega,
                t_f,
                m,
                big_m,
            } => {
                check_omega(*omega)?;
                check_victims(victims, s)?;
                battery_damage_matrix(*t_f, *m, *big_m, t_len).map(|_| ())
            }
            AttackSpec::Stealthy { inner, eps_s } => {
                check_eps_s(*eps_s)?;
                match inner.as_ref() {
                    AttackSpec::Stealthy { .. } | AttackSpec::DualPowerBalance { .. } => Err(Error::InvalidAttack(
                        "stealth wrapper applies to primal and full dual attacks only".into(),
                    )),
                    other => other.validate(prob),
                }
            }
            AttackSpec::DualFull { attacker, goal, omega } => {
                check_omega(*omega)?;
                check_agent(*attacker, s)?;
                if prob.eq().is_none() {
                    return Err(Error::InvalidAttack(
                        "full dual attack needs an equality-coupled problem".into(),
                    ));
                }
                goal.matrix(t_len).map(|_| ())
            }
            AttackSpec::DualPowerBalance {
                attacker,
                victims,
                omega,
                goal,
                eps_s,
            } => {
                check_omega(*omega)?;
                goal.matrix(t_len)?;
                check_agent(*attacker, s)?;
                check_victims(victims, s)?;
                check_eps_s(*eps_s)?;
                let buses = prob.buses();
                for &v in victims {
                    if v == *attacker {
                        return Err(Error::InvalidAttack("attacker cannot be its own victim".into()));
                    }
                    if buses[v] != buses[*attacker] {
                        return Err(Error::InvalidAttack(format!(
                            "victim {v} is on bus {}, attacker {attacker} on bus {}",
                            buses[v], buses[*attacker]
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    /// Agents whose update direction or channels the attack touches.
    pub fn targets(&self) -> Vec<usize> {
        match self {
            AttackSpec::SmoothCharging { attacker, .. }
            | AttackSpec::TimeTuning { attacker, .. }
            | AttackSpec::DualFull { attacker, .. } => vec![*attacker],
            AttackSpec::BatteryDamage { victims, .. } | AttackSpec::DualPowerBalance { victims, .. } => victims.clone(),
            AttackSpec::Stealthy { inner, .. } => inner.targets(),
        }
    }

    /// Per-agent goal weights and `ω` of a primal (or full dual) attack.
    pub fn goals(&self, t_len: usize) -> Result<Vec<(usize, S, ReshapeMatrix<S>)>> {
        match self {
            AttackSpec::SmoothCharging { attacker, omega } => Ok(vec![(*attacker, *omega, ReshapeMatrix::identity(t_len))]),
            AttackSpec::TimeTuning {
                attacker,
                omega,
                theta,
                m,
                big_m,
            } => Ok(vec![(*attacker, *omega, time_tuning_matrix(theta, *m, *big_m, t_len)?)]),
            AttackSpec::BatteryDamage {
                victims,
                omega,
                t_f,
                m,
                big_m,
            } => {
                let a = battery_damage_matrix(*t_f, *m, *big_m, t_len)?;
                Ok(victims.iter().map(|&v| (v, *omega, a.clone())).collect())
            }
            AttackSpec::DualFull { attacker, goal, omega } => Ok(vec![(*attacker, *omega, goal.matrix(t_len)?)]),
            AttackSpec::Stealthy { inner, .. } => inner.goals(t_len),
            AttackSpec::DualPowerBalance { .. } => Err(Error::NotApplicable(
                "the power-balance attack has no separable goal".into(),
            )),
        }
    }
}

/// Extra cost terms `Σ ω‖A c‖²` whose minimizer the listed attacks drive
/// SPDS towards, in the form the reference solver accepts.
pub fn equivalent_objective(specs: &[AttackSpec<f64>], t_len: usize) -> Result<Vec<DiagQuadratic>> {
    let mut out = Vec::new();
    for spec in specs {
        for (agent, omega, a) in spec.goals(t_len)? {
            out.push(DiagQuadratic {
                agent,
                diag: a.diag.iter().map(|d| 2.0 * omega * d * d).collect(),
            });
        }
    }
    Ok(out)
}

/// The profile an attacker aims for: the minimizer of its goal over its
/// own local set.
pub fn attacker_target<S: Scalar>(prob: &ValleyFillingProblem<S>, attacker: usize, goal: &GoalSpec<S>) -> Result<Vec<S>> {
    let a = goal.matrix(prob.horizon())?;
    let w: Vec<S> = a.diag.iter().map(|&d| d * d).collect();
    Ok(prob.sets()[attacker].min_weighted_norm(&w)?.into_inner())
}

/// Validates the attacks and wires them into agents (primal hooks) and the
/// bus (taps). `eps` is the run's convergence threshold.
pub fn install_attacks<S: Scalar + serde::Serialize>(
    specs: &[AttackSpec<S>],
    prob: &ValleyFillingProblem<S>,
    eps: S,
    mode: InjectionMode,
    agents: &mut [SpdsAgent<S>],
    bus: &mut MessageBus<S>,
) -> Result<()> {
    let t_len = prob.horizon();
    let default_eps_s = S::of(10.0) * eps;
    for (index, spec) in specs.iter().enumerate() {
        spec.validate(prob)?;
        let (base, gate) = match spec {
            AttackSpec::Stealthy { inner, eps_s } => {
                (inner.as_ref(), Some(StealthGate::new(eps_s.unwrap_or(default_eps_s))))
            }
            other => (other, None),
        };
        match base {
            AttackSpec::SmoothCharging { .. } | AttackSpec::TimeTuning { .. } | AttackSpec::BatteryDamage { .. } => {
                for (agent, omega, a) in base.goals(t_len)? {
                    agents[agent].add_hook(Box::new(ReshapeHook::new(index, omega, a, gate.clone(), mode)));
                }
            }
            AttackSpec::DualFull { attacker, goal, omega } => {
                bus.register_tap(
                    *attacker,
                    Channel::OperatorIo,
                    Box::new(DualFullTap {
                        index,
                        attacker: *attacker,
                        horizon: t_len,
                        omega: *omega,
                        matrix: goal.matrix(t_len)?,
                        gate,
                        last_norm: 0.0,
                    }),
                )?;
            }
            AttackSpec::DualPowerBalance {
                attacker,
                victims,
                omega,
                goal,
                eps_s,
            } => {
                let target = attacker_target(prob, *attacker, goal)?;
                let p_i = prob.pbar()[*attacker];
                let ratios: Vec<S> = victims.iter().map(|&v| prob.pbar()[v] / p_i).collect();
                for &victim in victims {
                    bus.register_tap(
                        *attacker,
                        Channel::Agent {
                            agent: victim,
                            dir: Direction::Downlink,
                        },
                        Box::new(PowerBalanceTap {
                            index,
                            attacker: *attacker,
                            victim,
                            victims: victims.clone(),
                            ratios: ratios.clone(),
                            target: target.clone(),
                            omega: *omega,
                            gate: StealthGate::new(eps_s.unwrap_or(default_eps_s)),
                            snapshot: None,
                            last_norm: 0.0,
                        }),
                    )?;
                }
            }
            AttackSpec::Stealthy { .. } => unreachable!("rejected by validate"),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_tuning_pattern() {
        let a = time_tuning_matrix(&[2, 3], 0.2, 1e5, 4).unwrap();
        assert_eq!(a.diag, vec![1e5, 0.2, 0.2, 1e5]);
        let full = time_tuning_matrix(&[1, 2, 3], 0.2, 1e5, 3).unwrap();
        assert_eq!(full.diag, vec![0.2; 3]);
        assert!(time_tuning_matrix::<f64>(&[], 0.2, 1e5, 4).is_err());
        assert!(time_tuning_matrix(&[5], 0.2, 1e5, 4).is_err());
    }

    #[test]
    fn battery_damage_pattern() {
        let a = battery_damage_matrix(2, 0.2, 1e5, 4).unwrap();
        assert_eq!(a.diag, vec![1e5, 0.2, 1e5, 0.2]);
        assert_eq!(battery_damage_matrix(1, 0.2, 1e5, 3).unwrap().diag, vec![0.2; 3]);
        assert!(battery_damage_matrix(0, 0.2, 1e5, 3).is_err());
    }

    #[test]
    fn smooth_injection_at_origin_is_zero() {
        let mut h = ReshapeHook::new(0, 1.0, ReshapeMatrix::identity(3), None, InjectionMode::Explicit);
        assert_eq!(h.perturbation(1, &[0.0; 3], 1.0).unwrap(), PrimalInjection::Gradient(vec![0.0; 3]));
        assert_eq!(h.injection(&[0.5, 1.0, 0.0]), vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn gate_latches() {
        let mut g = StealthGate::new(0.5);
        assert!(!g.observe(1, f64::INFINITY));
        assert!(!g.observe(2, 0.9));
        assert!(g.observe(3, 0.4));
        assert!(g.observe(4, 10.0));
        assert_eq!(g.activation(), Some(2));
        let mut never = StealthGate::new(0.0);
        assert!(!never.observe(1, 0.0));
        let mut always = StealthGate::new(f64::INFINITY);
        assert!(always.observe(1, f64::INFINITY));
        assert_eq!(always.activation(), Some(0));
    }

    #[test]
    fn full_falsification_cases() {
        assert_eq!(full_falsification(2.0, 5.0, &[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(full_falsification(2.0, 1.0, &[0.0, 1.0, 0.0]), vec![0.0, 2.0, 0.0]);
        let d = full_falsification_dual_grad(2.0, 3.0, &[0.3, -0.4]);
        assert!(d.iter().all(|v| f64::abs(*v) < 1e-12));
    }

    #[test]
    fn omega_must_be_positive() {
        assert!(check_omega(0.0).is_err());
        assert!(check_omega(f64::NAN).is_err());
        assert!(check_omega(0.1).is_ok());
    }
}
