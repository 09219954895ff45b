//! EV physics, energy requirements and the local feasible set
//! `{0 ≤ c ≤ 1, aᵀc = E_req}` with its Euclidean projection.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct EvSpec<S> {
    pub id: usize,
    /// Internal bus index, `0..n`.
    pub bus: usize,
    /// Maximum charging power, kW.
    pub p_max: S,
    pub eta: S,
    /// Battery capacity, kWh.
    pub cap: S,
    pub soc_ini: S,
    pub soc_des: S,
    /// Sampling interval, h.
    pub dt: S,
}

impl<S: Scalar> EvSpec<S> {
    pub fn validate(&self) -> Result<()> {
        let z = S::zero();
        let one = S::one();
        let bad = |what: &str| Err(Error::Config(format!("EV {}: {what}", self.id)));
        if !(z <= self.soc_ini && self.soc_ini <= self.soc_des && self.soc_des <= one) {
            return bad("require 0 <= soc_ini <= soc_des <= 1");
        }
        if !(self.p_max > z) {
            return bad("p_max must be positive");
        }
        if !(self.eta > z && self.eta <= one) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.dt > z) {
            return bad("dt must be positive");
        }
        if !(self.cap >= z) {
            return bad("capacity must be nonnegative");
        }
        Ok(())
    }

    /// Energy delivered per time slot at full rate, `η·Δt·P̄`, kWh.
    pub fn slot_energy(&self) -> S {
        self.eta * self.dt * self.p_max
    }
}

/// `E_req = Ê·(SOC_des − SOC_ini)`, kWh.
pub fn energy_requirement<S: Scalar>(spec: &EvSpec<S>) -> S {
    spec.cap * (spec.soc_des - spec.soc_ini)
}

/// Percentage charging rates over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargingProfile<S>(pub Vec<S>);

impl<S> ChargingProfile<S> {
    pub fn into_inner(self) -> Vec<S> {
        self.0
    }
}

impl<S> std::ops::Deref for ChargingProfile<S> {
    type Target = [S];
    fn deref(&self) -> &[S] {
        &self.0
    }
}

/// Box ∩ hyperplane feasible set of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibleSet<S> {
    pub agent: usize,
    pub lower: Vec<S>,
    pub upper: Vec<S>,
    /// Energy row, nonnegative entries.
    pub coeff: Vec<S>,
    /// Required energy, nonnegative.
    pub rhs: S,
}

impl<S: Scalar> FeasibleSet<S> {
    /// Set for an EV over `horizon` slots. `window`, when given, is the
    /// half-open plug-in interval; slots outside it are pinned to zero.
    pub fn from_spec(spec: &EvSpec<S>, horizon: usize, window: Option<(usize, usize)>) -> Result<Self> {
        spec.validate()?;
        let mut upper = vec![S::one(); horizon];
        if let Some((a, b)) = window {
            if a >= b || b > horizon {
                return Err(Error::Config(format!(
                    "EV {}: plug-in window [{a}, {b}) invalid for horizon {horizon}",
                    spec.id
                )));
            }
            for (t, u) in upper.iter_mut().enumerate() {
                if t < a || t >= b {
                    *u = S::zero();
                }
            }
        }
        let set = Self {
            agent: spec.id,
            lower: vec![S::zero(); horizon],
            upper,
            coeff: vec![spec.slot_energy(); horizon],
            rhs: energy_requirement(spec),
        };
        set.check_nonempty()?;
        Ok(set)
    }

    pub fn new(agent: usize, lower: Vec<S>, upper: Vec<S>, coeff: Vec<S>, rhs: S) -> Result<Self> {
        let t = lower.len();
        if upper.len() != t || coeff.len() != t {
            return Err(Error::Config(format!("agent {agent}: feasible set vectors differ in length")));
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::Config(format!("agent {agent}: lower bound above upper bound")));
        }
        if coeff.iter().any(|&a| a < S::zero()) || rhs < S::zero() {
            return Err(Error::Config(format!("agent {agent}: energy row must be nonnegative")));
        }
        let set = Self {
            agent,
            lower,
            upper,
            coeff,
            rhs,
        };
        set.check_nonempty()?;
        Ok(set)
    }

    pub fn horizon(&self) -> usize {
        self.coeff.len()
    }

    fn energy_at(&self, c: &[S]) -> S {
        self.coeff.iter().zip(c).map(|(&a, &x)| a * x).sum()
    }

    fn check_nonempty(&self) -> Result<()> {
        let lo = self.energy_at(&self.lower);
        let hi = self.energy_at(&self.upper);
        let slack = S::of(1e-12) * hi.max(S::one());
        if self.rhs < lo - slack || self.rhs > hi + slack {
            return Err(Error::EmptyFeasibleSet {
                agent: self.agent,
                required: self.rhs.to_f64_lossy(),
                deliverable: hi.to_f64_lossy(),
            });
        }
        Ok(())
    }

    /// Equality residual `aᵀc − E_req`.
    pub fn residual(&self, c: &[S]) -> S {
        self.energy_at(c) - self.rhs
    }

    pub fn contains(&self, c: &[S], tol: S) -> bool {
        c.len() == self.horizon()
            && c
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(&x, (&l, &u))| x >= l && x <= u)
            && self.residual(c).abs() <= tol * self.rhs.max(S::one())
    }

    /// Euclidean projection.
    ///
    /// The minimizer is `clamp(x + λ·a, l, u)` for the scalar `λ` solving
    /// `aᵀ clamp(x + λ·a) = E_req`. `λ` is bracketed by the values at which
    /// every coordinate sits at a bound, bisected, then refined by solving
    /// the equality exactly over the coordinates left free.
    pub fn project(&self, x: &[S]) -> Result<ChargingProfile<S>> {
        self.check_nonempty()?;
        assert_eq!(x.len(), self.horizon(), "profile length");
        if self.contains(x, S::epsilon() * S::of(4.0)) {
            return Ok(ChargingProfile(x.to_vec()));
        }
        self.solve_separable(x, None)
    }

    /// `argmin_c ½‖c − x‖² + ½Σ_t q_t c_t²` over the set, `q ≥ 0`: the
    /// proximal step of a diagonal quadratic. `q = 0` is the projection.
    pub fn prox_diag_quadratic(&self, x: &[S], q: &[S]) -> Result<ChargingProfile<S>> {
        self.check_nonempty()?;
        assert_eq!(x.len(), self.horizon(), "profile length");
        assert_eq!(q.len(), self.horizon(), "weight length");
        if q.iter().any(|&v| !(v >= S::zero())) {
            return Err(Error::Config("proximal weights must be nonnegative".into()));
        }
        if q.iter().all(|&v| v == S::zero()) {
            return self.project(x);
        }
        let h: Vec<S> = q.iter().map(|&v| S::one() + v).collect();
        self.solve_separable(x, Some(&h))
    }

    /// `argmin_c Σ_t w_t c_t²` over the set, `w > 0`.
    pub fn min_weighted_norm(&self, w: &[S]) -> Result<ChargingProfile<S>> {
        self.check_nonempty()?;
        assert_eq!(w.len(), self.horizon(), "weight length");
        if w.iter().any(|&v| !(v > S::zero()) || !v.is_finite()) {
            return Err(Error::Config("norm weights must be positive and finite".into()));
        }
        self.solve_separable(&vec![S::zero(); w.len()], Some(w))
    }

    /// Coordinates are `clamp((x_t + λ a_t)/h_t, l_t, u_t)`, `h > 0`.
    fn solve_separable(&self, x: &[S], h: Option<&[S]>) -> Result<ChargingProfile<S>> {
        let eps = S::epsilon();
        let scale = self.rhs.max(S::one());
        let h = |t: usize| h.map_or(S::one(), |h| h[t]);

        let eval = |lam: S| -> Vec<S> {
            (0..x.len())
                .map(|t| ((x[t] + lam * self.coeff[t]) / h(t)).max(self.lower[t]).min(self.upper[t]))
                .collect()
        };

        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        for t in 0..x.len() {
            let a = self.coeff[t];
            if a > S::zero() {
                lo = lo.min((self.lower[t] * h(t) - x[t]) / a);
                hi = hi.max((self.upper[t] * h(t) - x[t]) / a);
            }
        }
        if !lo.is_finite() {
            // energy row is identically zero; only the box matters
            return Ok(ChargingProfile(eval(S::zero())));
        }

        let tol = S::of(1e-12).max(eps * S::of(8.0)) * scale;
        let mut lam = (lo + hi) * S::half();
        for _ in 0..200 {
            lam = (lo + hi) * S::half();
            let r = self.residual(&eval(lam));
            if r.abs() <= tol {
                break;
            }
            if r < S::zero() {
                lo = lam;
            } else {
                hi = lam;
            }
            if hi - lo <= eps * (lo.abs() + hi.abs()) {
                break;
            }
        }

        // exact finish on the free set of the bracketed multiplier
        let c = eval(lam);
        let mut fixed_energy = S::zero();
        let mut free_num = S::zero();
        let mut free_den = S::zero();
        for (t, &ct) in c.iter().enumerate() {
            let (a, l, u) = (self.coeff[t], self.lower[t], self.upper[t]);
            if ct > l && ct < u && a > S::zero() {
                free_num += a * x[t] / h(t);
                free_den += a * a / h(t);
            } else {
                fixed_energy += a * ct;
            }
        }
        if free_den > S::zero() {
            let exact = (self.rhs - fixed_energy - free_num) / free_den;
            let refined = eval(exact);
            if self.residual(&refined).abs() <= self.residual(&c).abs() {
                return Ok(ChargingProfile(refined));
            }
        }
        Ok(ChargingProfile(c))
    }
}
