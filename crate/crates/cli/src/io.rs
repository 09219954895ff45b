//! Network, baseline and fleet files.

use std::fs;
use std::path::Path;

use dmao_core::{Baseline, Ev, Line, Matrix, Network, PerUnitBase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Radial feeder description. Node 0 is the feeder head; load buses are
/// `1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    #[serde(default)]
    pub name: String,
    pub n: usize,
    pub lines: Vec<Line>,
    pub v0_pu: f64,
    pub v_floor_pu: f64,
    pub base_kv: f64,
    pub base_kva: f64,
}

impl NetworkFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Validation(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    pub fn build(&self) -> CliResult<Network> {
        let base = PerUnitBase {
            kv: self.base_kv,
            kva: self.base_kva,
        };
        Ok(Network::from_lines(self.n, &self.lines, self.v0_pu, self.v_floor_pu, base)?)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let at = e
        .position()
        .map(|p| format!(" (line {})", p.line()))
        .unwrap_or_default();
    CliError::Validation(format!("{}{at}: {e}", path.display()))
}

/// Reads a per-bus series file with header `bus,t0,t1,...`. Buses are the
/// 1-based feeder numbers; every bus in `1..=n` must appear once.
pub fn read_bus_series(path: &Path, n: usize) -> CliResult<Matrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.get(0) != Some("bus") {
        return Err(CliError::Validation(format!("{}: first column must be `bus`", path.display())));
    }
    for (k, h) in header.iter().skip(1).enumerate() {
        if h != format!("t{k}") {
            return Err(CliError::Validation(format!(
                "{}: column {} should be `t{k}`, found `{h}`",
                path.display(),
                k + 2
            )));
        }
    }
    let t_len = header.len() - 1;
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; n];
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let at = |what: String| CliError::Validation(format!("{}: line {}: {what}", path.display(), line + 2));
        let bus: usize = rec[0].trim().parse().map_err(|_| at(format!("bad bus `{}`", &rec[0])))?;
        if bus == 0 || bus > n {
            return Err(at(format!("bus {bus} outside 1..={n}")));
        }
        if rows[bus - 1].is_some() {
            return Err(at(format!("bus {bus} listed twice")));
        }
        let vals = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| at("non-numeric or non-finite value".into()))?;
        rows[bus - 1] = Some(vals);
    }
    if let Some(missing) = rows.iter().position(Option::is_none) {
        return Err(CliError::Validation(format!("{}: bus {} missing", path.display(), missing + 1)));
    }
    let rows: Vec<Vec<f64>> = rows.into_iter().flatten().collect();
    Ok(Matrix::from_fn(n, t_len, |i, t| rows[i][t]))
}

/// Real and optional reactive baseline; a missing reactive file means zero.
pub fn read_baseline(p_path: &Path, q_path: Option<&Path>, n: usize) -> CliResult<Baseline> {
    let p = read_bus_series(p_path, n)?;
    let q = match q_path {
        Some(path) => read_bus_series(path, n)?,
        None => Matrix::zeros(n, p.cols()),
    };
    Ok(Baseline::new(p, q)?)
}

/// One fleet CSV row. `id` and `bus` are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetRow {
    pub id: usize,
    pub bus: usize,
    pub p_max_kw: f64,
    pub eta: f64,
    pub cap_kwh: f64,
    pub soc_ini: f64,
    pub soc_des: f64,
}

impl FleetRow {
    pub fn to_spec(&self, index: usize, dt_h: f64) -> Ev {
        Ev {
            id: index,
            bus: self.bus - 1,
            p_max: self.p_max_kw,
            eta: self.eta,
            cap: self.cap_kwh,
            soc_ini: self.soc_ini,
            soc_des: self.soc_des,
            dt: dt_h,
        }
    }
}

pub fn read_fleet(path: &Path, buses: usize) -> CliResult<Vec<FleetRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (k, rec) in rdr.deserialize::<FleetRow>().enumerate() {
        let row = rec.map_err(|e| csv_error(path, e))?;
        let at = |what: String| CliError::Validation(format!("{}: line {}: {what}", path.display(), k + 2));
        if row.id != k + 1 {
            return Err(at(format!("ids must run 1, 2, ... in order; found {}", row.id)));
        }
        if row.bus == 0 || row.bus > buses {
            return Err(at(format!("bus {} outside 1..={buses}", row.bus)));
        }
        out.push(row);
    }
    if out.is_empty() {
        return Err(CliError::Validation(format!("{}: fleet is empty", path.display())));
    }
    Ok(out)
}

pub fn write_fleet<W: std::io::Write>(rows: &[FleetRow], w: W) -> CliResult<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)
            .map_err(|e| CliError::Validation(format!("writing fleet: {e}")))?;
    }
    wtr.flush().map_err(|e| CliError::io("fleet output", e))?;
    Ok(())
}

/// Parameters of the synthetic fleet generator.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetGen {
    pub seed: u64,
    pub count: usize,
    pub buses: usize,
    /// The first `anchor_count` EVs sit on `anchor_bus`; the rest are spread
    /// uniformly over all buses.
    pub anchor_bus: usize,
    pub anchor_count: usize,
}

/// Charger ratings (kW) and their probabilities.
const RATINGS: [(f64, f64); 3] = [(3.3, 0.2), (6.6, 0.5), (7.2, 0.3)];

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn generate_fleet(g: &FleetGen) -> CliResult<Vec<FleetRow>> {
    if g.buses == 0 || g.anchor_bus == 0 || g.anchor_bus > g.buses {
        return Err(CliError::Validation(format!(
            "anchor bus {} outside 1..={}",
            g.anchor_bus, g.buses
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let rows = (0..g.count)
        .map(|k| {
            let bus = if k < g.anchor_count {
                g.anchor_bus
            } else {
                rng.gen_range(1..=g.buses)
            };
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut p_max_kw = RATINGS[RATINGS.len() - 1].0;
            for (p, w) in RATINGS {
                acc += w;
                if u < acc {
                    p_max_kw = p;
                    break;
                }
            }
            FleetRow {
                id: k + 1,
                bus,
                p_max_kw,
                eta: round3(rng.gen_range(0.88..0.95)),
                cap_kwh: round3(rng.gen_range(20.0..50.0)),
                soc_ini: round3(rng.gen_range(0.3..0.6)),
                soc_des: round3(rng.gen_range(0.8..0.9)),
            }
        })
        .collect();
    Ok(rows)
}
