use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use g2flow_cli::config::parse_config_at;
use g2flow_cli::runner::{Manifest, Verification};

fn g2flow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g2flow"))
        .args(args)
        .env("G2FLOW_THREADS", "1")
        .output()
        .unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

fn column(csv: &str, name: &str) -> Vec<f64> {
    let mut lines = csv.lines();
    let i = lines
        .next()
        .unwrap()
        .split(',')
        .position(|h| h == name)
        .unwrap();
    lines
        .map(|l| l.split(',').nth(i).unwrap().parse().unwrap_or(f64::NAN))
        .collect()
}

const FLAT: &str = r#"
[grid]
n = 8
[initial]
kind = "flat"
[flow]
steps = 6
[checks]
pullback_samples = 20
[output]
dir = "out"
snapshot_every = 3
"#;

const SMALL: &str = r#"
[grid]
n = 10
[initial]
kind = "perturbed"
epsilon = 0.05
[flow]
steps = 6
[pinching]
inequality_every = 2
gammas = [1.5, 2.0]
[checks]
enabled = ["closedness", "volume", "scalar_sign", "pinching_fit", "pinching_inequality"]
[output]
dir = "out"
snapshot_every = 2
"#;

#[test]
fn flat_run_passes_with_vanishing_residuals() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "flat.toml", FLAT);
    let o = g2flow(&["run", cfg.to_str().unwrap()]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stdout)
    );
    let out = d.path().join("out");
    for f in [
        "manifest.json",
        "timeseries.csv",
        "verification.json",
        "plots/scalar_curvature.svg",
        "snapshots/step_000003.g2snap",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(!out.join("error.json").exists());
    let csv = read(out.join("timeseries.csv"));
    assert_eq!(csv.lines().count(), 8);
    for col in [
        "min_r",
        "max_r",
        "closedness",
        "period_drift",
        "w_c1_max",
        "e_norm_max",
        "f_max_gamma_2",
    ] {
        assert!(column(&csv, col).iter().all(|x| x.abs() <= 1e-10), "{col}");
    }
    let v: Verification = serde_json::from_str(&read(out.join("verification.json"))).unwrap();
    assert_eq!(v.checks.len(), 9);
    assert!(v.passed);
    let m: Manifest = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(m.columns.join(","), csv.lines().next().unwrap());
    assert_eq!(m.threads, 1);
}

#[test]
fn reruns_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "small.toml", SMALL);
    let a = d.path().join("a");
    let b = d.path().join("b");
    for dir in [&a, &b] {
        let o = g2flow(&[
            "run",
            cfg.to_str().unwrap(),
            "--output",
            dir.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    for f in ["timeseries.csv", "verification.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
}

#[test]
fn resume_reproduces_the_unbroken_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "small.toml", SMALL);
    let o = g2flow(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let full = d.path().join("out");
    let snap = full.join("snapshots/step_000004.g2snap");
    let resumed = d.path().join("resumed");
    let o = g2flow(&[
        "resume",
        snap.to_str().unwrap(),
        cfg.to_str().unwrap(),
        "--output",
        resumed.to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let (x, y) = (
        read(full.join("timeseries.csv")),
        read(resumed.join("timeseries.csv")),
    );
    assert_eq!(x, y);
    assert_eq!(
        read(full.join("verification.json")),
        read(resumed.join("verification.json"))
    );
    // no gap in time: the resumed rows continue from the stored ones
    let steps = column(&y, "step");
    assert_eq!(steps, (0..=6).map(|k| k as f64).collect::<Vec<_>>());
    let m: Manifest = serde_json::from_str(&read(resumed.join("manifest.json"))).unwrap();
    assert_eq!(m.command, "resume");
}

#[test]
fn resume_with_different_physics_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "small.toml", SMALL);
    assert_eq!(
        g2flow(&["run", cfg.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let other = write(
        d.path(),
        "other.toml",
        &SMALL.replace("epsilon = 0.05", "epsilon = 0.06"),
    );
    let snap = d.path().join("out/snapshots/step_000002.g2snap");
    let o = g2flow(&["resume", snap.to_str().unwrap(), other.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let rec: serde_json::Value =
        serde_json::from_str(&read(d.path().join("out/error.json"))).unwrap();
    assert_eq!(rec["kind"], "resume");
}

#[test]
fn manifest_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "small.toml", SMALL);
    assert_eq!(
        g2flow(&["run", cfg.to_str().unwrap()]).status.code(),
        Some(0)
    );
    let out = d.path().join("out");
    let m: Manifest = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    let echoed = write(d.path(), "echo.toml", &m.config);
    assert_eq!(
        parse_config_at(&m.config, d.path()).unwrap().hash(),
        m.config_hash
    );
    let again = d.path().join("again");
    let o = g2flow(&[
        "run",
        echoed.to_str().unwrap(),
        "--output",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        read(out.join("timeseries.csv")),
        read(again.join("timeseries.csv"))
    );
    let m2: Manifest = serde_json::from_str(&read(again.join("manifest.json"))).unwrap();
    assert_eq!(m2.physics_hash, m.physics_hash);
}

#[test]
fn config_errors_exit_2_and_list_every_violation() {
    let d = tempfile::tempdir().unwrap();
    let bad = write(
        d.path(),
        "bad.toml",
        "[grid]\nn = 8\nwidth = 3\n[initial]\nkind = \"perturbed\"\nepsilon = -1\n",
    );
    let o = g2flow(&["run", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    let rec: serde_json::Value = serde_json::from_str(err.lines().next().unwrap()).unwrap();
    assert_eq!(rec["kind"], "config");
    let v = rec["violations"].as_array().unwrap();
    assert_eq!(v.len(), 3, "{v:?}");
    let dup = write(d.path(), "dup.toml", "[grid]\nn = 8\nn = 9\n");
    assert_eq!(
        g2flow(&["verify", dup.to_str().unwrap()]).status.code(),
        Some(2)
    );
    assert_eq!(
        g2flow(&["run", d.path().join("missing.toml").to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn check_failure_exits_1() {
    let d = tempfile::tempdir().unwrap();
    // max/median of a series is at least 1, so this bound cannot be met
    let text = SMALL
        .replace(
            "[output]",
            "[checks.tolerances]\nstability_ratio = 0.5\n[output]",
        )
        .replace("steps = 6", "steps = 2");
    let cfg = write(d.path(), "strict.toml", &text);
    let o = g2flow(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let v: Verification =
        serde_json::from_str(&read(d.path().join("out/verification.json"))).unwrap();
    assert!(!v.passed);
    assert!(!v.check("pinching_inequality").unwrap().passed);
    assert!(v.check("closedness").unwrap().passed);
    let report = g2flow(&["report", d.path().join("out").to_str().unwrap()]);
    assert_eq!(report.status.code(), Some(1));
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(
        text.contains("time series: 3 rows") && text.contains("[FAIL] pinching_inequality"),
        "{text}"
    );
}

#[test]
fn positivity_loss_exits_3_with_error_record() {
    let d = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("epsilon = 0.05", "epsilon = 0.5")
        .replace("steps = 6", "steps = 3\nfixed_dt = 50.0");
    let cfg = write(d.path(), "blow.toml", &text);
    let o = g2flow(&["run", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let out = d.path().join("out");
    let rec: serde_json::Value = serde_json::from_str(&read(out.join("error.json"))).unwrap();
    assert_eq!(rec["kind"], "positivity_lost");
    assert_eq!(rec["exit_code"], 3);
    // the rows written so far are a complete CSV
    assert_eq!(read(out.join("timeseries.csv")).lines().count(), 2);
    let m: Manifest = serde_json::from_str(&read(out.join("manifest.json"))).unwrap();
    assert_eq!(m.status, "runtime_error");
}

#[test]
fn verify_runs_only_static_checks() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "flat.toml", FLAT);
    let o = g2flow(&["verify", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: Verification =
        serde_json::from_str(&read(d.path().join("out/verification.json"))).unwrap();
    let names: Vec<&str> = v.checks.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(
        names,
        ["pointwise", "structure", "evolution", "metric_crosscheck"]
    );
    assert!(!d.path().join("out/timeseries.csv").exists());
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_g2flow"))
        .args(["report", "."])
        .env("G2FLOW_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/perturbed.toml");
    let cfg = g2flow_cli::load_config(&path).unwrap();
    assert_eq!(cfg.flow.steps, 200);
}
