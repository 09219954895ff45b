//! Side-by-side comparison of two runs on the same instance.

use std::fs;
use std::io::Write;
use std::path::Path;

use dmao_core::analysis::{profile_deviation, Deviation};
use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentComparison {
    /// 1-based.
    pub agent: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub std_a: f64,
    pub std_b: f64,
    /// Deviation of run A's profile from run B's.
    pub deviation: Deviation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub agents: Vec<AgentComparison>,
    pub total_a_kw: Vec<f64>,
    pub total_b_kw: Vec<f64>,
    pub baseline_kw: Vec<f64>,
    /// Deviation of the whole stacked profile.
    pub overall: Deviation,
}

pub fn compare_solutions(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    total_a: &[f64],
    total_b: &[f64],
    baseline: &[f64],
) -> CliResult<Comparison> {
    let t_a = a.first().map_or(0, Vec::len);
    let t_b = b.first().map_or(0, Vec::len);
    if a.len() != b.len() || t_a != t_b || total_a.len() != total_b.len() {
        return Err(CliError::Validation(format!(
            "runs differ in shape: {}x{t_a} vs {}x{t_b}",
            a.len(),
            b.len()
        )));
    }
    let agents = a
        .iter()
        .zip(b)
        .enumerate()
        .map(|(i, (x, y))| AgentComparison {
            agent: i + 1,
            mean_a: dmao_core::linalg::mean(x),
            mean_b: dmao_core::linalg::mean(y),
            std_a: dmao_core::linalg::std_dev(x),
            std_b: dmao_core::linalg::std_dev(y),
            deviation: profile_deviation(x, y),
        })
        .collect();
    let flat_a: Vec<f64> = a.concat();
    let flat_b: Vec<f64> = b.concat();
    Ok(Comparison {
        agents,
        total_a_kw: total_a.to_vec(),
        total_b_kw: total_b.to_vec(),
        baseline_kw: baseline.to_vec(),
        overall: profile_deviation(&flat_a, &flat_b),
    })
}

/// Writes `comparison.csv` (per agent) and `overlay.csv` (total load).
pub fn write_comparison(dir: &Path, c: &Comparison) -> CliResult<()> {
    let mut s = Vec::new();
    let body = (|| -> std::io::Result<()> {
        writeln!(s, "agent,mean_a,mean_b,std_a,std_b,mean_rel,mean_shift,l2_rel")?;
        for r in &c.agents {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.agent,
                r.mean_a,
                r.mean_b,
                r.std_a,
                r.std_b,
                r.deviation.mean_rel,
                r.deviation.mean_shift,
                r.deviation.l2_rel
            )?;
        }
        writeln!(
            s,
            "all,,,,,{},{},{}",
            c.overall.mean_rel, c.overall.mean_shift, c.overall.l2_rel
        )?;
        Ok(())
    })();
    body.map_err(|e| CliError::io(dir, e))?;
    let path = dir.join("comparison.csv");
    fs::write(&path, &s).map_err(|e| CliError::io(&path, e))?;

    let mut o = String::from("t,baseline_kw,total_a_kw,total_b_kw\n");
    for t in 0..c.total_a_kw.len() {
        o.push_str(&format!(
            "{t},{},{},{}\n",
            c.baseline_kw.get(t).copied().unwrap_or(f64::NAN),
            c.total_a_kw[t],
            c.total_b_kw[t]
        ));
    }
    let path = dir.join("overlay.csv");
    fs::write(&path, o).map_err(|e| CliError::io(&path, e))
}

fn read_rows(path: &Path, skip_cols: usize) -> CliResult<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .skip(1)
        .enumerate()
        .map(|(k, l)| {
            l.split(',')
                .skip(skip_cols)
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| CliError::Validation(format!("{}: line {}: {e}", path.display(), k + 2)))
        })
        .collect()
}

/// Compares the artifacts of two run directories.
pub fn compare_run_dirs(a: &Path, b: &Path) -> CliResult<Comparison> {
    let sol_a = read_rows(&a.join("solution.csv"), 1)?;
    let sol_b = read_rows(&b.join("solution.csv"), 1)?;
    // load.csv: t,clock,baseline_kw,ev_kw,total_kw
    let load_a = read_rows(&a.join("load.csv"), 2)?;
    let load_b = read_rows(&b.join("load.csv"), 2)?;
    let col = |rows: &[Vec<f64>], k: usize| rows.iter().map(|r| r[k]).collect::<Vec<f64>>();
    compare_solutions(&sol_a, &sol_b, &col(&load_a, 2), &col(&load_b, 2), &col(&load_a, 0))
}
