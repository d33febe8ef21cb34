//! Plots and text summaries built from a run directory.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::Path;

use g2flow::snapshot::write_atomic;

use crate::runner::{Manifest, RunError, Verification};
use crate::svg::{line_chart, Series};

/// Columns of a CSV time series keyed by header name; empty cells are NaN.
pub fn parse_csv(text: &str) -> Result<BTreeMap<String, Vec<f64>>, RunError> {
    let bad = |message: String| RunError::Malformed {
        what: "timeseries.csv".into(),
        message,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .collect();
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    for (n, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(bad(format!(
                "row {} has {} cells, header has {}",
                n + 1,
                cells.len(),
                header.len()
            )));
        }
        for (col, cell) in cols.iter_mut().zip(cells) {
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse()
                    .map_err(|_| bad(format!("row {}: not a number: {cell:?}", n + 1)))?
            };
            col.push(v);
        }
    }
    Ok(header.into_iter().map(String::from).zip(cols).collect())
}

/// (file name, title, columns) of each chart.
fn layout(cols: &BTreeMap<String, Vec<f64>>) -> Vec<(String, String, Vec<String>)> {
    let f_cols: Vec<String> = cols
        .keys()
        .filter(|k| k.starts_with("f_max_gamma_"))
        .cloned()
        .collect();
    let mut v = vec![
        (
            "scalar_curvature",
            "scalar curvature R",
            vec!["min_r", "max_r"],
        ),
        ("hitchin_volume", "Hitchin volume", vec!["hitchin_volume"]),
        ("weyl_c1", "max |W|_C1", vec!["w_c1_max"]),
        ("closedness", "max |dphi|", vec!["closedness"]),
        (
            "period_drift",
            "relative period drift",
            vec!["period_drift"],
        ),
        (
            "einstein_ratio",
            "Einstein ratio and driver",
            vec!["ratio_lhs", "ratio_rhs_driver"],
        ),
        (
            "metric_distortion",
            "metric distortion and bound",
            vec!["metric_distortion", "distortion_bound"],
        ),
        ("time_step", "accepted dt", vec!["dt"]),
        (
            "inequality_constant",
            "minimal inequality constant",
            vec!["ineq_min_c", "ineq_sup_ratio"],
        ),
    ]
    .into_iter()
    .map(|(f, t, c)| {
        (
            f.to_string(),
            t.to_string(),
            c.into_iter().map(String::from).collect::<Vec<_>>(),
        )
    })
    .collect::<Vec<_>>();
    v.insert(1, ("pinching_f".into(), "max f per gamma".into(), f_cols));
    v
}

/// Renders every chart for a CSV time series into `<dir>/plots`.
pub fn write_plots(dir: &Path, csv: &str) -> Result<(), RunError> {
    let cols = parse_csv(csv)?;
    let t = cols.get("t").cloned().unwrap_or_default();
    let plots = dir.join("plots");
    for (file, title, names) in layout(&cols) {
        let series: Vec<Series> = names
            .iter()
            .filter_map(|n| {
                cols.get(n).map(|ys| Series {
                    label: n,
                    points: t.iter().copied().zip(ys.iter().copied()).collect(),
                })
            })
            .collect();
        if series.is_empty() {
            continue;
        }
        let path = plots.join(format!("{file}.svg"));
        write_atomic(&path, line_chart(&title, "t", &series).as_bytes())
            .map_err(|source| RunError::Io { path, source })?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, RunError> {
    fs::read_to_string(path).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_json<D: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<D, RunError> {
    serde_json::from_str(&read(path)?).map_err(|e| RunError::Malformed {
        what: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Text summary of a run directory, regenerating its plots when the run
/// has a time series. Returns the summary and the recorded exit code.
pub fn summarize(dir: &Path) -> Result<(String, i32), RunError> {
    let manifest: Manifest = parse_json(&dir.join("manifest.json"))?;
    let mut out = String::new();
    let _ = writeln!(out, "run directory: {}", dir.display());
    let _ = writeln!(
        out,
        "command: {}  status: {}  exit code: {}",
        manifest.command, manifest.status, manifest.exit_code
    );
    let _ = writeln!(out, "config hash: {}", manifest.config_hash);
    let err = dir.join("error.json");
    if err.exists() {
        let _ = writeln!(out, "error: {}", read(&err)?.trim());
    }
    let ver = dir.join("verification.json");
    if ver.exists() {
        let v: Verification = parse_json(&ver)?;
        let _ = writeln!(
            out,
            "steps: {}  final t: {:.6e}  shift c: {:.6e}",
            v.steps, v.final_t, v.c
        );
        for c in &v.checks {
            let _ = writeln!(
                out,
                "  [{}] {}",
                if c.passed { "pass" } else { "FAIL" },
                c.name
            );
        }
    }
    let csv = dir.join("timeseries.csv");
    if csv.exists() {
        let text = read(&csv)?;
        let cols = parse_csv(&text)?;
        let rows = cols.get("step").map_or(0, |c| c.len());
        let _ = writeln!(out, "time series: {rows} rows");
        for name in [
            "min_r",
            "max_r",
            "hitchin_volume",
            "closedness",
            "period_drift",
            "w_c1_max",
        ] {
            if let Some(c) = cols.get(name).filter(|c| !c.is_empty()) {
                let _ = writeln!(
                    out,
                    "  {name:16} first {:>24.16e}  last {:>24.16e}",
                    c[0],
                    c[c.len() - 1]
                );
            }
        }
        write_plots(dir, &text)?;
        let _ = writeln!(out, "plots: {}", dir.join("plots").display());
    }
    Ok((out, manifest.exit_code))
}
