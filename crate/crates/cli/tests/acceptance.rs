//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//! Runs without the libtest harness so the lines always reach the console.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use g2flow::evolution::{verify_evolution, EvolutionCheck, VerifyTolerances};
use g2flow::flow::{self, FlowState, StepPolicy};
use g2flow::g2::{pullback_suite, standard_phi, verify_contraction_identities};
use g2flow::grid::GridSpec;
use g2flow::initial::{flat, perturbed, Perturbation};
use g2flow::torsion::structure_residuals;
use g2flow_cli::config::parse_config_at;
use g2flow_cli::runner::{self, Manifest, Verification};

struct Line {
    id: u32,
    title: &'static str,
    passed: bool,
    detail: String,
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

fn perturbed_state(n: usize) -> FlowState<f64> {
    let grid = GridSpec::with_active(&[0, 1], n).unwrap();
    FlowState::new(
        0.0,
        0,
        perturbed(
            &grid,
            &Perturbation {
                epsilon: 0.05,
                ..Default::default()
            },
        ),
    )
}

fn pointwise() -> Line {
    let t0 = Instant::now();
    let standard = verify_contraction_identities(&standard_phi::<f64>())
        .unwrap()
        .max_abs();
    let suite = pullback_suite(20240601, 1000).unwrap();
    let el = t0.elapsed();
    let passed = standard <= 1e-12 && suite.max_relative <= 1e-8 && el < Duration::from_secs(10);
    Line {
        id: 1,
        title: "pointwise algebra",
        passed,
        detail: format!(
            "standard {standard:.1e} <= 1e-12; {} pullbacks ({} reversing) max relative {:.1e} <= 1e-8; {} < 10 s",
            suite.count,
            suite.reversed,
            suite.max_relative,
            secs(el)
        ),
    }
}

fn flat_fixed_point() -> Line {
    let t0 = Instant::now();
    let grid = GridSpec::with_active(&[0, 1], 16).unwrap();
    let s0 = FlowState::new(0.0, 0, flat(&grid));
    let mut s = s0.clone();
    for _ in 0..100 {
        s = flow::step(&s, &StepPolicy::default()).unwrap().0;
    }
    let moved = s.phi().max_abs_diff(s0.phi());
    let b = s.curvature().unwrap();
    let t = s.torsion().unwrap().t.max_abs();
    let w = b.weyl.as_ref().unwrap().max_abs();
    let worst = [moved, t, b.scalar.max_abs(), b.rm.max_abs(), w]
        .into_iter()
        .fold(0.0, f64::max);
    let el = t0.elapsed();
    Line {
        id: 2,
        title: "flat fixed point",
        passed: worst <= 1e-12 && el < Duration::from_secs(30),
        detail: format!(
            "N=16, 100 steps: max change {moved:.1e}, |T| {t:.1e}, |R| {:.1e}, |Rm| {:.1e}, |W| {w:.1e} (all <= 1e-12); {} < 30 s",
            b.scalar.max_abs(),
            b.rm.max_abs(),
            secs(el)
        ),
    }
}

fn structure_orders() -> Line {
    let t0 = Instant::now();
    let res = |n: usize| {
        let s = perturbed_state(n);
        let st = s.structure().unwrap();
        structure_residuals(
            &st.phi,
            &st.psi,
            &st.metric,
            s.torsion().unwrap(),
            s.curvature().unwrap(),
        )
        .named()
    };
    let (a, b) = (res(32), res(64));
    let orders: Vec<(&str, f64)> = a
        .iter()
        .zip(&b)
        .map(|((n, x), (_, y))| (*n, (x / y).log2()))
        .collect();
    let min = orders.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    let el = t0.elapsed();
    let list: Vec<String> = orders.iter().map(|(n, o)| format!("{n} {o:.2}")).collect();
    Line {
        id: 3,
        title: "structure identities",
        passed: min >= 3.5 && el < Duration::from_secs(300),
        detail: format!(
            "N 32->64 orders: {}; min {min:.2} >= 3.5; {} < 300 s",
            list.join(", "),
            secs(el)
        ),
    }
}

fn evolution() -> Line {
    let t0 = Instant::now();
    let s = perturbed_state(64);
    let gammas = [1.5, 2.0, 3.0];
    let dt = flow::suggested_dt(&s, &StepPolicy::default()).unwrap();
    let c = g2flow::pinching::auto_shift(s.curvature().unwrap().scalar.min());
    let rep = verify_evolution(
        &s,
        dt,
        &EvolutionCheck::all(&gammas),
        c,
        &gammas,
        &VerifyTolerances::default(),
    )
    .unwrap();
    let el = t0.elapsed();
    let min_order = rep
        .checks
        .iter()
        .filter_map(|c| c.measured_time_order)
        .fold(f64::INFINITY, f64::min);
    let worst_rel = rep
        .checks
        .iter()
        .map(|c| c.relative / c.tolerance)
        .fold(0.0, f64::max);
    let worst_cross = rep
        .cross_checks
        .iter()
        .map(|c| c.relative / c.tolerance)
        .fold(0.0, f64::max);
    let failed: Vec<&str> = rep
        .checks
        .iter()
        .map(|c| (c.name.as_str(), c.passed))
        .chain(rep.cross_checks.iter().map(|c| (c.name.as_str(), c.passed)))
        .filter(|c| !c.1)
        .map(|c| c.0)
        .collect();
    Line {
        id: 6,
        title: "evolution equations",
        passed: rep.passed() && el < Duration::from_secs(600),
        detail: format!(
            "N=64, {} equations, {} cross-checks; min time order {min_order:.3} >= 1.8; worst residual/tolerance {worst_rel:.2}, cross {worst_cross:.2}; failed {failed:?}; {} < 600 s",
            rep.checks.len(),
            rep.cross_checks.len(),
            secs(el)
        ),
    }
}

const LONG_RUN: &str = r#"
seed = 7
[grid]
n = 32
active = [1, 2]
[initial]
kind = "perturbed"
epsilon = 0.05
[flow]
steps = 200
[pinching]
c = "auto"
gammas = [2.0]
inequality_every = 10
[checks]
enabled = ["closedness", "volume", "scalar_sign", "pinching_fit", "pinching_inequality"]
[output]
dir = "long"
snapshot_every = 50
"#;

fn detail(v: &Verification, name: &str) -> serde_json::Value {
    v.check(name).map(|c| c.details.clone()).unwrap_or_default()
}

fn passed(v: &Verification, name: &str) -> bool {
    v.check(name).is_some_and(|c| c.passed)
}

fn long_run(root: &Path) -> (Vec<Line>, Line) {
    let t0 = Instant::now();
    let cfg = parse_config_at(LONG_RUN, root).unwrap();
    let out = runner::run(&cfg).expect("run completes");
    let el = t0.elapsed();
    let v = &out.verification;
    let c = detail(v, "closedness");
    let vol = detail(v, "volume");
    let pf = detail(v, "pinching_fit");
    let pi = detail(v, "pinching_inequality");
    let sc = detail(v, "scalar_sign");
    let lines = vec![
        Line {
            id: 4,
            title: "closedness and periods",
            passed: passed(v, "closedness"),
            detail: format!(
                "200 steps at N=32 ({}): max |dphi| {:.1e} <= 1e-12, max period drift {:.1e} <= 1e-10",
                secs(el),
                c["max_closedness"]["value"].as_f64().unwrap_or(f64::NAN),
                c["max_period_drift"]["value"].as_f64().unwrap_or(f64::NAN)
            ),
        },
        Line {
            id: 5,
            title: "volume monotonicity",
            passed: passed(v, "volume"),
            detail: format!(
                "largest relative one-step decrease {:.1e} <= 1e-10",
                vol["max_relative_decrease"]["value"].as_f64().unwrap_or(f64::NAN)
            ),
        },
        Line {
            id: 7,
            title: "pinching monitors",
            passed: passed(v, "pinching_fit") && passed(v, "pinching_inequality"),
            detail: format!(
                "c = {:.4}; f finite: {}; fit C1 {:.3}, C2 {:.3}, min margin {:.3e} >= 0; minimal C over {} samples: max/median {} <= 10",
                v.c,
                pf["f_finite"],
                pf["c1"].as_f64().unwrap_or(f64::NAN),
                pf["c2"].as_f64().unwrap_or(f64::NAN),
                pf["min_margin"].as_f64().unwrap_or(f64::NAN),
                pi["samples"],
                pi["stability_ratio"]
            ),
        },
        Line {
            id: 9,
            title: "scalar nonpositivity",
            passed: passed(v, "scalar_sign"),
            detail: format!(
                "max R over all states {:.2e} at step {} <= bound {:.2e}",
                sc["max_r"]["value"].as_f64().unwrap_or(f64::NAN),
                sc["max_r"]["step"],
                sc["bound"].as_f64().unwrap_or(f64::NAN)
            ),
        },
    ];
    let persistence = persistence(root, &cfg);
    (lines, persistence)
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap_or_default()
}

fn persistence(root: &Path, long: &g2flow_cli::RunConfig) -> Line {
    let t0 = Instant::now();
    let mut notes = Vec::new();
    // resume the long run from step 150 into a fresh directory
    let mut cfg = long.clone();
    cfg.output.dir = root.join("resumed");
    let snap = long
        .output
        .dir
        .join("snapshots")
        .join(runner::snapshot_name(150));
    let resumed = runner::resume(&snap, &cfg).is_ok_and(|o| o.exit_code == 0);
    let same_csv =
        read(long.output.dir.join("timeseries.csv")) == read(cfg.output.dir.join("timeseries.csv"));
    let same_json = read(long.output.dir.join("verification.json"))
        == read(cfg.output.dir.join("verification.json"));
    notes.push(format!(
        "resume@150 CSV identical: {same_csv}, verification identical: {same_json}"
    ));
    // run a short configuration, then rerun it from its manifest echo
    let short = parse_config_at(
        "[grid]\nn = 16\n[initial]\nkind = \"perturbed\"\n[flow]\nsteps = 20\n[checks]\npullback_samples = 50\n[output]\ndir = \"short\"\nsnapshot_every = 10\n",
        root,
    )
    .unwrap();
    let first = runner::run(&short).is_ok_and(|o| o.exit_code == 0);
    let m: Option<Manifest> =
        serde_json::from_str(&read(short.output.dir.join("manifest.json"))).ok();
    let round_trip = m.is_some_and(|m| {
        let Ok(mut echo) = parse_config_at(&m.config, root) else {
            return false;
        };
        let hash_ok = echo.hash() == m.config_hash;
        echo.output.dir = root.join("short_echo");
        let rerun = runner::run(&echo).is_ok_and(|o| o.exit_code == 0);
        let same = read(short.output.dir.join("timeseries.csv"))
            == read(echo.output.dir.join("timeseries.csv"))
            && read(short.output.dir.join("verification.json"))
                == read(echo.output.dir.join("verification.json"));
        hash_ok && rerun && same
    });
    notes.push(format!(
        "manifest round trip (N=16, 20 steps, all checks) reproduces outputs: {round_trip}"
    ));
    Line {
        id: 8,
        title: "determinism and persistence",
        passed: resumed && same_csv && same_json && first && round_trip,
        detail: format!("{}; {}", notes.join("; "), secs(t0.elapsed())),
    }
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().unwrap();
    let mut lines = vec![pointwise(), flat_fixed_point(), structure_orders()];
    let (flow_lines, persist) = long_run(root.path());
    lines.extend(flow_lines);
    lines.push(evolution());
    lines.push(persist);
    lines.sort_by_key(|l| l.id);
    println!();
    for l in &lines {
        println!(
            "criterion {} [{}] {}: {}",
            l.id,
            if l.passed { "PASS" } else { "FAIL" },
            l.title,
            l.detail
        );
    }
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!(
        "acceptance: {} of {} criteria pass",
        lines.len() - failed,
        lines.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
