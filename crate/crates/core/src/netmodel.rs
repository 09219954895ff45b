//! Linearized single-phase distribution feeder.
//!
//! Squared nodal voltage magnitudes follow `V(t) = V0 − 2·R·P(t) − 2·X·Q(t)`
//! with `R`, `X` the shared-path resistance and reactance matrices of a
//! radial feeder. Everything is tracked in squared magnitudes; square roots
//! are taken only when reporting p.u. values.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fleet::EvSpec;
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Per-unit bases for converting line impedances and powers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerUnitBase {
    /// Line-to-line base voltage in kV.
    pub kv: f64,
    /// Three-phase power base in kVA (also the kW per p.u. of real power).
    pub kva: f64,
}

impl PerUnitBase {
    /// Impedance base in ohm.
    pub fn z_base_ohm(&self) -> f64 {
        self.kv * self.kv * 1000.0 / self.kva
    }
}

/// One feeder segment. Node 0 is the feeder head (slack); load buses are
/// numbered `1..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionNetwork<S> {
    r: Matrix<S>,
    x: Matrix<S>,
    /// Squared slack voltage magnitude, p.u.².
    v0_sq: S,
    /// Lower bound on the voltage magnitude, p.u.
    v_floor: S,
    /// kW represented by one p.u. of power in `r`/`x`.
    power_base_kw: S,
}

impl<S: Scalar> DistributionNetwork<S> {
    /// `r`, `x` are in p.u. on a power base of `power_base_kw`.
    pub fn new(r: Matrix<S>, x: Matrix<S>, v0_sq: S, v_floor: S, power_base_kw: S) -> Result<Self> {
        let n = r.rows();
        if n == 0 {
            return Err(Error::Config("network needs at least one bus".into()));
        }
        if r.cols() != n || x.rows() != n || x.cols() != n {
            return Err(Error::Config(format!(
                "R is {}x{}, X is {}x{}; both must be {n}x{n}",
                r.rows(),
                r.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let tol = S::of(1e-12);
        for (name, m) in [("R", &r), ("X", &x)] {
            if !m.is_symmetric(tol) {
                return Err(Error::Config(format!("{name} is not symmetric")));
            }
            if m.as_slice().iter().any(|&v| v < S::zero() || !v.is_finite()) {
                return Err(Error::Config(format!("{name} has negative or non-finite entries")));
            }
        }
        if !(v0_sq > S::zero()) {
            return Err(Error::Config("slack voltage must be positive".into()));
        }
        if !(v_floor > S::zero() && v_floor < S::one()) {
            return Err(Error::Config(format!("voltage floor {v_floor} outside (0, 1)")));
        }
        if !(power_base_kw > S::zero()) {
            return Err(Error::Config("power base must be positive".into()));
        }
        Ok(Self {
            r,
            x,
            v0_sq,
            v_floor,
            power_base_kw,
        })
    }

    /// Builds `R` and `X` of a radial feeder from its segments: entry
    /// `(i, j)` is the total impedance of the segments shared by the paths
    /// from the feeder head to buses `i` and `j`.
    pub fn from_lines(
        n: usize,
        lines: &[Line],
        v0_pu: f64,
        v_floor_pu: f64,
        base: PerUnitBase,
    ) -> Result<Self> {
        let (r, x) = shared_path_matrices(n, lines)?;
        let z = base.z_base_ohm();
        let to_s = |m: Vec<Vec<f64>>| {
            Matrix::from_fn(n, n, |i, j| S::of(m[i][j] / z))
        };
        Self::new(
            to_s(r),
            to_s(x),
            S::of(v0_pu * v0_pu),
            S::of(v_floor_pu),
            S::of(base.kva),
        )
    }

    pub fn buses(&self) -> usize {
        self.r.rows()
    }

    pub fn r(&self) -> &Matrix<S> {
        &self.r
    }

    pub fn x(&self) -> &Matrix<S> {
        &self.x
    }

    pub fn v0_sq(&self) -> S {
        self.v0_sq
    }

    pub fn v_floor(&self) -> S {
        self.v_floor
    }

    pub fn power_base_kw(&self) -> S {
        self.power_base_kw
    }

    /// Squared-voltage floor `v̲²·V0`.
    pub fn floor_sq(&self) -> S {
        self.v_floor * self.v_floor * self.v0_sq
    }
}

/// Shared-path impedance construction in ohm. Fails unless the segments
/// form a tree rooted at node 0 that spans buses `1..=n`.
pub fn shared_path_matrices(n: usize, lines: &[Line]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if lines.len() != n {
        return Err(Error::Config(format!(
            "radial feeder with {n} buses needs {n} lines, got {}",
            lines.len()
        )));
    }
    let mut parent: Vec<Option<(usize, f64, f64)>> = vec![None; n + 1];
    for l in lines {
        if l.to == 0 || l.to > n || l.from > n || l.from == l.to {
            return Err(Error::Config(format!("line {}->{} references an invalid bus", l.from, l.to)));
        }
        if l.r_ohm < 0.0 || l.x_ohm < 0.0 {
            return Err(Error::Config(format!("line {}->{} has negative impedance", l.from, l.to)));
        }
        if parent[l.to].is_some() {
            return Err(Error::Config(format!("bus {} has two upstream lines", l.to)));
        }
        parent[l.to] = Some((l.from, l.r_ohm, l.x_ohm));
    }
    // path from each bus to the head as a list of segment end-buses
    let mut paths: Vec<Vec<usize>> = vec![Vec::new(); n + 1];
    for bus in 1..=n {
        let mut cur = bus;
        let mut seen = 0;
        while cur != 0 {
            let (up, _, _) = parent[cur].ok_or_else(|| {
                Error::Config(format!("bus {cur} is not connected to the feeder head"))
            })?;
            paths[bus].push(cur);
            cur = up;
            seen += 1;
            if seen > n {
                return Err(Error::Config("feeder contains a loop".into()));
            }
        }
    }
    let mut r = vec![vec![0.0; n]; n];
    let mut x = vec![vec![0.0; n]; n];
    for i in 1..=n {
        for j in 1..=n {
            for &seg in &paths[i] {
                if paths[j].contains(&seg) {
                    let (_, rs, xs) = parent[seg].unwrap();
                    r[i - 1][j - 1] += rs;
                    x[i - 1][j - 1] += xs;
                }
            }
        }
    }
    Ok((r, x))
}

/// Non-EV load per bus and time slot, kW / kvar.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineProfile<S> {
    p: Matrix<S>,
    q: Matrix<S>,
    agg: Vec<S>,
}

impl<S: Scalar> BaselineProfile<S> {
    /// `p`, `q` are `n × T`.
    pub fn new(p: Matrix<S>, q: Matrix<S>) -> Result<Self> {
        if p.rows() != q.rows() || p.cols() != q.cols() {
            return Err(Error::Config("real and reactive baselines differ in shape".into()));
        }
        if p.as_slice().iter().chain(q.as_slice()).any(|v| !v.is_finite()) {
            return Err(Error::Config("baseline contains non-finite values".into()));
        }
        let agg = (0..p.cols()).map(|t| (0..p.rows()).map(|l| p.get(l, t)).sum()).collect();
        Ok(Self { p, q, agg })
    }

    pub fn buses(&self) -> usize {
        self.p.rows()
    }

    pub fn horizon(&self) -> usize {
        self.p.cols()
    }

    pub fn p(&self) -> &Matrix<S> {
        &self.p
    }

    pub fn q(&self) -> &Matrix<S> {
        &self.q
    }

    /// Network-wide baseline `P_b(t) = Σ_l p_base(l, t)`, kW.
    pub fn aggregate(&self) -> &[S] {
        &self.agg
    }
}

/// `V_b(t) = 2·R·p_base(t) + 2·X·q_base(t)` in p.u.².
pub fn baseline_voltage_drop<S: Scalar>(
    net: &DistributionNetwork<S>,
    base: &BaselineProfile<S>,
    t: usize,
) -> Result<Vec<S>> {
    check_len("baseline buses", net.buses(), base.buses())?;
    if t >= base.horizon() {
        return Err(Error::Config(format!("time index {t} outside horizon {}", base.horizon())));
    }
    let pb = net.power_base_kw();
    let p: Vec<S> = base.p.column(t).into_iter().map(|v| v / pb).collect();
    let q: Vec<S> = base.q.column(t).into_iter().map(|v| v / pb).collect();
    let rp = net.r.mul_vec(&p);
    let xq = net.x.mul_vec(&q);
    let drop: Vec<S> = rp.iter().zip(&xq).map(|(&a, &b)| S::two() * (a + b)).collect();
    if let Some((bus, v)) = drop
        .iter()
        .map(|&d| net.v0_sq() - d)
        .enumerate()
        .find(|(_, v)| !(*v > S::zero()))
    {
        return Err(Error::Infeasible(format!(
            "baseline alone drives squared voltage at bus index {bus} to {v} at t={t}"
        )));
    }
    Ok(drop)
}

/// Map from EV charging rates to squared nodal voltages.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionModel<S> {
    g: Matrix<S>,
    pbar: Vec<S>,
    d: Matrix<S>,
    /// `V0 − V_b(t)` stacked over time, time-major (`t·n + bus`).
    y_d: Vec<S>,
    horizon: usize,
}

impl<S: Scalar> InjectionModel<S> {
    /// Assembles the model directly from its parts; `d` is recomputed.
    pub fn from_parts(net: &DistributionNetwork<S>, g: Matrix<S>, pbar_kw: Vec<S>, y_d: Vec<S>) -> Result<Self> {
        let n = net.buses();
        check_len("incidence rows", n, g.rows())?;
        check_len("incidence columns", pbar_kw.len(), g.cols())?;
        if y_d.len() % n != 0 {
            return Err(Error::Config("stacked y_d length is not a multiple of the bus count".into()));
        }
        for j in 0..g.cols() {
            let col = g.column(j);
            let ones = col.iter().filter(|&&v| v == S::one()).count();
            let zeros = col.iter().filter(|&&v| v == S::zero()).count();
            if ones != 1 || ones + zeros != n {
                return Err(Error::Config(format!("incidence column {j} is not a unit vector")));
            }
        }
        let pb = net.power_base_kw();
        let pbar_pu = Matrix::from_fn(pbar_kw.len(), pbar_kw.len(), |i, j| {
            if i == j {
                pbar_kw[i] / pb
            } else {
                S::zero()
            }
        });
        let d = net.r().mul(&g).mul(&pbar_pu).scale(-S::two());
        let horizon = y_d.len() / n;
        Ok(Self {
            g,
            pbar: pbar_kw,
            d,
            y_d,
            horizon,
        })
    }

    pub fn buses(&self) -> usize {
        self.d.rows()
    }

    pub fn agents(&self) -> usize {
        self.d.cols()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn g(&self) -> &Matrix<S> {
        &self.g
    }

    /// Maximum charging powers, kW.
    pub fn pbar(&self) -> &[S] {
        &self.pbar
    }

    /// `D = −2·R·G·P̄` (p.u.² per unit charging rate).
    pub fn d(&self) -> &Matrix<S> {
        &self.d
    }

    pub fn y_d(&self) -> &[S] {
        &self.y_d
    }

    pub fn y_d_at(&self, t: usize) -> &[S] {
        let n = self.buses();
        &self.y_d[t * n..(t + 1) * n]
    }
}

pub fn build_injection_model<S: Scalar>(
    net: &DistributionNetwork<S>,
    fleet: &[EvSpec<S>],
    base: &BaselineProfile<S>,
) -> Result<InjectionModel<S>> {
    let n = net.buses();
    check_len("baseline buses", n, base.buses())?;
    let mut g = Matrix::zeros(n, fleet.len());
    for (j, ev) in fleet.iter().enumerate() {
        if ev.bus >= n {
            return Err(Error::Config(format!(
                "EV {} assigned to bus index {} but the network has {n} buses",
                ev.id, ev.bus
            )));
        }
        g.set(ev.bus, j, S::one());
    }
    let mut y_d = Vec::with_capacity(n * base.horizon());
    for t in 0..base.horizon() {
        let drop = baseline_voltage_drop(net, base, t)?;
        y_d.extend(drop.into_iter().map(|v| net.v0_sq() - v));
    }
    InjectionModel::from_parts(net, g, fleet.iter().map(|e| e.p_max).collect(), y_d)
}

/// `y(t) = y_d(t) + D·C(t)` where `c_t[i]` is agent `i`'s rate at `t`.
pub fn nodal_voltages<S: Scalar>(inj: &InjectionModel<S>, c_t: &[S], t: usize) -> Result<Vec<S>> {
    check_len("fleet rates", inj.agents(), c_t.len())?;
    if t >= inj.horizon() {
        return Err(Error::Config(format!("time index {t} outside horizon {}", inj.horizon())));
    }
    let dc = inj.d.mul_vec(c_t);
    Ok(inj.y_d_at(t).iter().zip(dc).map(|(&y, v)| y + v).collect())
}

/// Stacked `nT` squared voltages for per-agent profiles.
pub fn stacked_voltages<S: Scalar>(inj: &InjectionModel<S>, profiles: &[Vec<S>]) -> Result<Vec<S>> {
    check_len("fleet profiles", inj.agents(), profiles.len())?;
    let mut out = Vec::with_capacity(inj.buses() * inj.horizon());
    for t in 0..inj.horizon() {
        let c_t: Vec<S> = profiles.iter().map(|p| p[t]).collect();
        out.extend(nodal_voltages(inj, &c_t, t)?);
    }
    Ok(out)
}
