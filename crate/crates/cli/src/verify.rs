//! Re-checks recorded bounds from their raw quantities, independent of the
//! pass flags stored alongside them.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{CliError, CliResult};

fn num(v: &Value, key: &str) -> CliResult<f64> {
    v.get(key)
        .and_then(Value::as_f64)
        .ok_or_else(|| CliError::Validation(format!("bounds report lacks numeric `{key}`")))
}

/// Failed inequalities of one report; empty when every bound holds.
pub fn recheck(report: &Value) -> CliResult<Vec<String>> {
    let m = num(report, "m_cert")?;
    let b = num(report, "b")?;
    let tp = num(report, "tangent_proj")?;
    let dev = num(report, "dev")?;
    let gap = num(report, "obj_gap")?;
    let l_f = num(report, "l_f")?;
    let f0 = num(report, "objective_free")?;
    let tol = 1e-9 * (1.0 + f0.abs());
    let dev_tol = 1e-7 * (1.0 + dev);
    let mut fails = Vec::new();
    let mut check = |name: &str, lhs: f64, rhs: f64, t: f64| {
        if lhs > rhs + t {
            fails.push(format!("{name}: {lhs:.6e} > {rhs:.6e}"));
        }
    };
    check("deviation vs projected bound", dev, tp / m, dev_tol);
    check("deviation vs B/m", dev, b / m, dev_tol);
    check("projection vs B", tp, b, 1e-9 * (1.0 + b));
    check("objective gap sign", 0.0, gap, tol);
    check("objective gap vs projected bound", gap, tp * tp / (2.0 * m), tol);
    check("objective gap vs smoothness bound", gap, 0.5 * l_f * dev * dev, tol);
    let agents = report
        .get("per_agent")
        .and_then(Value::as_array)
        .ok_or_else(|| CliError::Validation("bounds report lacks `per_agent`".into()))?;
    for a in agents {
        let i = a.get("agent").and_then(Value::as_u64).unwrap_or(0) + 1;
        check(
            &format!("agent {i} deviation vs L/m"),
            num(a, "dev")?,
            num(a, "lipschitz")? / m,
            dev_tol,
        );
    }
    Ok(fails)
}

/// Every `bounds.json` below `dir` with its failures.
pub fn verify_bounds_dir(dir: &Path) -> CliResult<Vec<(PathBuf, Vec<String>)>> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(|e| CliError::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "bounds.json") {
                found.push(p);
            }
        }
    }
    found.sort();
    found
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            Ok((p, recheck(&v)?))
        })
        .collect()
}
