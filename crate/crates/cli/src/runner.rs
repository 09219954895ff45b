//! Scenario execution and artifact emission.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dmao_core::analysis::{bounds_report, scenario_metrics, MetricsContext, ScenarioMetrics, TAU_ACT};
use dmao_core::{run_spds, Attack, LogLevel, Outcome, ReferenceOptions, RunOptions};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::compare::{compare_solutions, write_comparison};
use crate::error::{CliError, CliResult};
use crate::scenario::Instance;

/// Environment variable naming the output root.
pub const OUTPUT_ROOT_ENV: &str = "DMAO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantSummary {
    pub name: String,
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub scenario: String,
    pub dir: PathBuf,
    pub variants: Vec<VariantSummary>,
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

/// `HH:MM` label of slot `k`, or the slot number when no start is given.
pub fn clock_label(start: Option<&str>, dt_h: f64, k: usize) -> String {
    let parsed = start.and_then(|s| {
        let (h, m) = s.split_once(':')?;
        Some(h.parse::<u32>().ok()? * 60 + m.parse::<u32>().ok()?)
    });
    match parsed {
        Some(min0) => {
            let min = (min0 as f64 + k as f64 * dt_h * 60.0).round() as u64 % (24 * 60);
            format!("{:02}:{:02}", min / 60, min % 60)
        }
        None => k.to_string(),
    }
}

pub fn write_solution<W: Write>(mut w: W, profiles: &[Vec<f64>]) -> std::io::Result<()> {
    let t_len = profiles.first().map_or(0, Vec::len);
    write!(w, "agent")?;
    for t in 0..t_len {
        write!(w, ",t{t}")?;
    }
    writeln!(w)?;
    for (i, p) in profiles.iter().enumerate() {
        write!(w, "{}", i + 1)?;
        for v in p {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn write_metrics<W: Write>(mut w: W, m: &ScenarioMetrics, activations: &[(usize, Option<usize>)]) -> std::io::Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    writeln!(w, "metric,value")?;
    writeln!(w, "converged,{}", m.converged)?;
    writeln!(w, "iterations,{}", m.iterations)?;
    if let Some((a, b)) = m.valley_window {
        writeln!(w, "valley_window,{a}-{b}")?;
    }
    writeln!(w, "valley_mean_kw,{}", opt(m.valley_mean_kw))?;
    writeln!(w, "valley_flatness,{}", opt(m.valley_flatness))?;
    writeln!(w, "peak_total_kw,{}", m.total_load_kw.iter().cloned().fold(f64::NAN, f64::max))?;
    writeln!(w, "min_voltage_pu,{}", opt(m.min_voltage_pu))?;
    writeln!(w, "voltage_violations,{}", m.voltage_violations)?;
    writeln!(w, "oscillation_score,{}", opt(m.oscillation_score))?;
    for g in &m.goal_attainment {
        writeln!(w, "goal.attack{}.agent{}.{},{}", g.attack, g.agent + 1, g.metric, g.value)?;
    }
    if let Some(d) = m.attack_deviation {
        writeln!(w, "attack_deviation.mean_rel,{}", d.mean_rel)?;
        writeln!(w, "attack_deviation.mean_shift,{}", d.mean_shift)?;
        writeln!(w, "attack_deviation.l2_rel,{}", d.l2_rel)?;
    }
    for (attack, round) in activations {
        writeln!(
            w,
            "attack{attack}.activation_round,{}",
            round.map_or(String::new(), |r| r.to_string())
        )?;
    }
    Ok(())
}

/// Activation round `ℓ` per gated attack, read off the trace: the round
/// before the first one whose gate column reads open.
fn activation_rounds(outcome: &Outcome) -> Vec<(usize, Option<usize>)> {
    let n = outcome.trace.records.first().map_or(0, |r| r.attacks.len());
    (0..n)
        .filter(|&a| outcome.trace.records[0].attacks[a].gate_open.is_some())
        .map(|a| {
            let first = outcome
                .trace
                .records
                .iter()
                .find(|r| r.attacks[a].gate_open == Some(true))
                .map(|r| r.k - 1);
            (a, first)
        })
        .collect()
}

fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    bytes: u64,
}

#[derive(Serialize)]
struct Manifest {
    scenario: String,
    seed: u64,
    files: Vec<ManifestEntry>,
}

/// Writes `manifest.json` listing every file under `dir` (except itself).
fn write_manifest(dir: &Path, scenario: &str, seed: u64) -> CliResult<()> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> CliResult<()> {
        let mut entries: Vec<_> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(base, &p, out)?;
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.push(p.strip_prefix(base).unwrap_or(&p).to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    let entries = files
        .iter()
        .map(|rel| {
            let (sha256, bytes) = sha256_file(&dir.join(rel))?;
            Ok(ManifestEntry {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256,
                bytes,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let m = Manifest {
        scenario: scenario.to_string(),
        seed,
        files: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

struct VariantRun {
    name: String,
    attacks: Vec<Attack>,
    outcome: Outcome,
    dir: PathBuf,
}

/// Whether the deviation bounds can be evaluated for these attacks.
fn bounds_applicable(delta: f64, attacks: &[Attack], horizon: usize) -> bool {
    delta > 0.0 && !attacks.is_empty() && attacks.iter().all(|a| a.goals(horizon).is_ok())
}

impl ScenarioSummary {
    /// Fails with a non-convergence error naming the variants that hit
    /// `max_iter`.
    pub fn require_converged(&self) -> CliResult<()> {
        let failed: Vec<&str> = self.variants.iter().filter(|v| !v.converged).map(|v| v.name.as_str()).collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(CliError::NonConvergence(format!(
                "{}: variants {} stopped before reaching the residual threshold",
                self.scenario,
                failed.join(", ")
            )))
        }
    }
}

/// Runs every variant of an instance and writes its artifacts under
/// `root/<output dir>`. Non-converged variants still produce artifacts.
pub fn run_instance(inst: &Instance, root: &Path) -> CliResult<ScenarioSummary> {
    let sc = &inst.scenario;
    let out = root.join(sc.output_dir());
    if out.exists() {
        fs::remove_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    }
    fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let level = sc.log_level()?;
    let prob = &inst.problem;
    let t_len = prob.horizon();
    let base_kw = sc.problem.objective_base_kw;

    let mut runs = Vec::new();
    for (name, attacks) in &inst.variants {
        let dir = out.join(name);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let log: Option<(LogLevel, Box<dyn Write + Send>)> = match level {
            LogLevel::Off => None,
            lv => Some((lv, Box::new(create(&dir.join("roundlog.jsonl"))?))),
        };
        let outcome = run_spds(
            prob,
            &inst.config,
            attacks,
            RunOptions {
                voltages: inst.injection.as_ref(),
                log,
                initial: None,
            },
        )?;
        write_file(&dir.join("trace.csv"), |w| outcome.trace.write_csv(w))?;
        let profiles = prob.split(&outcome.solution);
        write_file(&dir.join("solution.csv"), |w| write_solution(w, &profiles))?;
        let total = prob.aggregate(&outcome.solution);
        write_file(&dir.join("load.csv"), |w| {
            writeln!(w, "t,clock,baseline_kw,ev_kw,total_kw")?;
            for t in 0..t_len {
                let b = prob.baseline()[t] * base_kw;
                let tot = total[t] * base_kw;
                writeln!(
                    w,
                    "{t},{},{b},{},{tot}",
                    clock_label(sc.horizon.start.as_deref(), sc.horizon.dt_h, t),
                    tot - b
                )?;
            }
            Ok(())
        })?;
        runs.push(VariantRun {
            name: name.clone(),
            attacks: attacks.clone(),
            outcome,
            dir,
        });
    }

    let reference = sc
        .metrics
        .reference_variant
        .as_ref()
        .and_then(|r| runs.iter().find(|v| &v.name == r))
        .map(|v| v.outcome.solution.clone());
    for run in &runs {
        let ctx = MetricsContext {
            injection: inst.injection.as_ref(),
            valley_window: sc.metrics.valley_window,
            objective_base_kw: base_kw,
            v_floor: inst.v_floor,
            comparison: reference.as_deref(),
        };
        let m = scenario_metrics(
            prob,
            &run.outcome.solution,
            run.outcome.converged,
            run.outcome.iterations,
            &run.attacks,
            &ctx,
        )?;
        let acts = activation_rounds(&run.outcome);
        write_file(&run.dir.join("metrics.csv"), |w| write_metrics(w, &m, &acts))?;
        if sc.output.bounds && bounds_applicable(prob.delta(), &run.attacks, t_len) {
            let report = bounds_report(prob, &run.attacks, &ReferenceOptions::default(), TAU_ACT)?;
            let path = run.dir.join("bounds.json");
            let text = serde_json::to_string_pretty(&report).expect("bounds report serializes");
            fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        }
    }

    for c in &sc.comparisons {
        let a = runs.iter().find(|v| v.name == c.a).expect("validated");
        let b = runs.iter().find(|v| v.name == c.b).expect("validated");
        let report = compare_solutions(
            &prob.split(&a.outcome.solution),
            &prob.split(&b.outcome.solution),
            &prob
                .aggregate(&a.outcome.solution)
                .iter()
                .map(|v| v * base_kw)
                .collect::<Vec<_>>(),
            &prob
                .aggregate(&b.outcome.solution)
                .iter()
                .map(|v| v * base_kw)
                .collect::<Vec<_>>(),
            &prob.baseline().iter().map(|v| v * base_kw).collect::<Vec<_>>(),
        )?;
        let dir = out.join("compare").join(format!("{}_vs_{}", c.a, c.b));
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_comparison(&dir, &report)?;
    }

    write_manifest(&out, &sc.name, sc.seed)?;
    let variants: Vec<VariantSummary> = runs
        .iter()
        .map(|r| VariantSummary {
            name: r.name.clone(),
            converged: r.outcome.converged,
            iterations: r.outcome.iterations,
            final_residual: r.outcome.trace.records.last().map_or(f64::NAN, |x| x.residual),
            dir: r.dir.clone(),
        })
        .collect();
    Ok(ScenarioSummary {
        scenario: sc.name.clone(),
        dir: out,
        variants,
    })
}

/// Parses `metrics.csv` into a map.
pub fn read_metrics(path: &Path) -> CliResult<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(','))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
