//! Batch driver: builds the initial state, runs the enabled checks and the
//! flow, and writes the run directory.
//!
//! ```text
//! <dir>/manifest.json        config echo, hashes, versions, timings
//! <dir>/timeseries.csv       one row per state, columns in `columns()`
//! <dir>/verification.json    check results (deterministic)
//! <dir>/plots/*.svg
//! <dir>/snapshots/step_NNNNNN.g2snap (+ .json progress sidecar)
//! <dir>/error.json           only when the run aborted
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use g2flow::evolution::{
    pinching_inequality_sample, stability_ratio, verify_evolution, InequalitySample, VerifyError,
};
use g2flow::flow::{self, FlowError, FlowState};
use g2flow::g2::{pullback_suite, standard_phi, verify_contraction_identities, G2Error};
use g2flow::grid::{GridError, GridSpec};
use g2flow::initial;
use g2flow::metric::MetricField;
use g2flow::pinching::{self, MonitorCarry, PinchingConfig, PinchingError, PinchingReport};
use g2flow::snapshot::{self, write_atomic, SnapshotError};
use g2flow::torsion::structure_residuals;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{CheckId, ConfigError, InitialConfig, RunConfig, ShiftPolicy};
use crate::report;

pub const CSV_VERSION: u32 = 1;
pub const PROGRESS_VERSION: u32 = 1;
/// Bound for the contraction identities on the standard φ itself.
pub const STANDARD_PHI_TOL: f64 = 1e-12;

type State = FlowState<f64>;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("grid: {0}")]
    Grid(#[from] GridError),
    #[error("snapshot {path}: {source}")]
    Snapshot {
        path: PathBuf,
        source: SnapshotError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Pinching(#[from] PinchingError),
    #[error("pointwise algebra: {0}")]
    Algebra(#[from] G2Error),
    #[error("malformed {what}: {message}")]
    Malformed { what: String, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Resume(_) => 2,
            _ => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Resume(_) => "resume",
            RunError::Grid(_) => "grid",
            RunError::Snapshot { .. } => "snapshot",
            RunError::Io { .. } => "io",
            RunError::Flow(FlowError::PositivityLost { .. }) => "positivity_lost",
            RunError::Flow(FlowError::Stalled { .. }) => "stalled",
            RunError::Verify(_) => "verify",
            RunError::Pinching(_) => "pinching",
            RunError::Algebra(_) => "algebra",
            RunError::Malformed { .. } => "malformed",
        }
    }

    /// Machine-readable record written to `error.json`.
    pub fn record(&self) -> Value {
        let mut v = json!({ "kind": self.kind(), "message": self.to_string(), "exit_code": self.exit_code() });
        if let RunError::Config(c) = self {
            v["violations"] = json!(c.violations);
        }
        v
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn snap_err(path: &Path) -> impl FnOnce(SnapshotError) -> RunError + '_ {
    move |source| RunError::Snapshot {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    pub details: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub passed: bool,
    pub steps: u64,
    pub final_t: f64,
    pub c: f64,
    pub checks: Vec<CheckRecord>,
    /// max|W|_{C¹}·(T − t)^{1−δ} per row, when a blow-up time is configured.
    pub weyl_rate: Option<Value>,
}

impl Verification {
    pub fn check(&self, name: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Worst value of a per-step quantity and where it occurred.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub value: f64,
    pub step: u64,
}

fn bump(w: &mut Option<Worst>, value: f64, step: u64) {
    // NaN must register as a violation, so it always wins
    if w.map_or(true, |w| value > w.value || value.is_nan()) {
        *w = Some(Worst { value, step });
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Tracks {
    pub closedness: Option<Worst>,
    pub period_drift: Option<Worst>,
    /// Largest relative decrease of the Hitchin volume over one step.
    pub volume_drop: Option<Worst>,
    pub max_r: Option<Worst>,
}

/// Everything needed to continue a run from a snapshot; stored next to
/// each snapshot as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProgress {
    pub version: u32,
    pub physics_hash: String,
    pub step: u64,
    pub t: f64,
    pub c: f64,
    pub ric0_max: f64,
    pub c1_small: f64,
    pub scalar_bound: f64,
    pub periods0: Vec<f64>,
    pub last_volume: f64,
    pub carry: MonitorCarry,
    pub history: Vec<PinchingReport>,
    pub inequality: Vec<InequalitySample>,
    pub tracks: Tracks,
    pub preflow: Vec<CheckRecord>,
    pub rows: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub g2flow: String,
    pub cli: String,
    pub snapshot_format: u32,
    pub csv_columns: u32,
    pub progress: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Versions {
            g2flow: g2flow::VERSION.into(),
            cli: env!("CARGO_PKG_VERSION").into(),
            snapshot_format: snapshot::VERSION,
            csv_columns: CSV_VERSION,
            progress: PROGRESS_VERSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub exit_code: i32,
    pub config: String,
    pub config_hash: String,
    pub physics_hash: String,
    pub versions: Versions,
    pub columns: Vec<String>,
    pub threads: usize,
    pub resumed_from: Option<PathBuf>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub timings: BTreeMap<String, f64>,
}

/// Result of a completed invocation.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub exit_code: i32,
    pub dir: PathBuf,
    pub verification: Verification,
}

pub fn columns(gammas: &[f64]) -> Vec<String> {
    let mut c: Vec<String> = [
        "step",
        "t",
        "dt",
        "rejections",
        "min_r",
        "max_r",
        "shifted_min",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    c.extend(gammas.iter().map(|g| format!("f_max_gamma_{g}")));
    c.extend(
        [
            "w_c1_max",
            "hitchin_volume",
            "closedness",
            "period_drift",
            "e_norm_max",
            "ratio_lhs",
            "ratio_rhs_driver",
            "metric_distortion",
            "distortion_bound",
            "ineq_min_c",
            "ineq_sup_ratio",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    c
}

fn num(x: f64) -> String {
    format!("{x:.17e}")
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn snapshot_name(step: u64) -> String {
    format!("step_{step:06}.g2snap")
}

/// Sidecar path for a snapshot file.
pub fn progress_path(snap: &Path) -> PathBuf {
    snap.with_extension("json")
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(v).expect("serialisable");
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(io_err(path))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Malformed {
        what: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn initial_state(cfg: &RunConfig) -> Result<State, RunError> {
    let grid = GridSpec::new(cfg.grid.shape, cfg.grid.periods)?;
    Ok(match &cfg.initial {
        InitialConfig::Flat => FlowState::new(0.0, 0, initial::flat(&grid)),
        InitialConfig::Perturbed(p) => FlowState::new(0.0, 0, initial::perturbed(&grid, p)),
        InitialConfig::Snapshot { path } => {
            let s: State = snapshot::load(path).map_err(snap_err(path))?;
            snapshot::check_grid(&s, &grid).map_err(|e| ConfigError {
                violations: vec![e.to_string()],
            })?;
            // the stored form is the new initial datum; time restarts at 0
            FlowState::new(0.0, 0, s.phi().clone())
        }
    })
}

// ---------------------------------------------------------------------------
// static checks

fn pointwise_check(cfg: &RunConfig) -> Result<CheckRecord, RunError> {
    let tol = cfg.checks.tolerances.pointwise_relative;
    let standard = verify_contraction_identities(&standard_phi::<f64>())?.max_abs();
    let suite = pullback_suite(cfg.seed, cfg.checks.pullback_samples)?;
    let passed = standard <= STANDARD_PHI_TOL
        && suite.max_relative <= tol
        && suite.max_metric_mismatch <= tol;
    Ok(CheckRecord {
        name: CheckId::Pointwise.name().into(),
        passed,
        details: json!({
            "standard_max_abs": standard,
            "standard_bound": STANDARD_PHI_TOL,
            "pullbacks": suite,
            "relative_bound": tol,
        }),
    })
}

/// Structure identities at one state against space_coeff·h⁴·max(|Rm|, |T|, |Γ|).
/// The Christoffel symbols enter because a state near a pulled-back flat
/// structure has tiny curvature but non-constant coefficients, and the
/// truncation error follows the coefficients.
fn structure_details(s: &State, cfg: &RunConfig) -> Result<(bool, Value), RunError> {
    let st = s.structure()?;
    let tf = s.torsion()?;
    let b = s.curvature()?;
    let r = structure_residuals(&st.phi, &st.psi, &st.metric, tf, b);
    let v = &cfg.checks.tolerances.verify;
    let h = st.grid().h_max();
    let scale =
        b.rm.max_abs()
            .max(tf.t.max_abs())
            .max(st.metric.christoffel().max_abs());
    let bound = (v.spatial(h) * scale).max(v.static_abs);
    let named = r.named();
    let passed = named.iter().all(|(_, x)| *x <= bound);
    let residuals: serde_json::Map<String, Value> = named
        .iter()
        .map(|(k, x)| (k.to_string(), json!(x)))
        .collect();
    Ok((
        passed,
        json!({ "step": s.step_index(), "h": h, "scale": scale, "bound": bound, "residuals": residuals }),
    ))
}

fn evolution_check(s: &State, cfg: &RunConfig, c: f64) -> Result<CheckRecord, RunError> {
    let dt = flow::suggested_dt(s, &cfg.flow.policy)?;
    let checks = cfg.checks.evolution_checks(&cfg.pinching.gammas);
    let rep = verify_evolution(
        s,
        dt,
        &checks,
        c,
        &cfg.pinching.gammas,
        &cfg.checks.tolerances.verify,
    )?;
    Ok(CheckRecord {
        name: CheckId::Evolution.name().into(),
        passed: rep.passed(),
        details: serde_json::to_value(&rep).expect("serialisable"),
    })
}

fn metric_check(s: &State, cfg: &RunConfig) -> Result<CheckRecord, RunError> {
    let tol = &cfg.checks.tolerances;
    let dt = flow::suggested_dt(s, &cfg.flow.policy)?;
    let traj = flow::fixed_trajectory(s.clone(), dt, 2)?;
    let mc = flow::metric_evolution_crosscheck(&traj[0], &traj[1], &traj[2])?;
    let h = s.phi().grid().h_max();
    let scale = traj[1].curvature()?.scalar.max_abs();
    let trace_bound = (tol.verify.spatial(h) * scale).max(tol.verify.static_abs);
    let passed = mc.velocity_relative <= tol.metric_velocity
        && mc.trace_identity <= tol.verify.algebraic
        && mc.trace_skew <= trace_bound
        && mc.trace_two_thirds <= trace_bound;
    Ok(CheckRecord {
        name: CheckId::MetricCrosscheck.name().into(),
        passed,
        details: json!({
            "dt": dt,
            "residuals": mc,
            "velocity_bound": tol.metric_velocity,
            "identity_bound": tol.verify.algebraic,
            "trace_bound": trace_bound,
        }),
    })
}

/// Pre-flow checks in their canonical order; structure is stored under
/// its name with only the initial-state details.
fn preflow(
    s: &State,
    cfg: &RunConfig,
    c: f64,
    timings: &mut BTreeMap<String, f64>,
) -> Result<Vec<CheckRecord>, RunError> {
    let mut out = Vec::new();
    for id in CheckId::ALL
        .into_iter()
        .filter(|c| c.is_static() && cfg.checks.on(*c))
    {
        let t0 = Instant::now();
        out.push(match id {
            CheckId::Pointwise => pointwise_check(cfg)?,
            CheckId::Structure => {
                let (passed, d) = structure_details(s, cfg)?;
                CheckRecord {
                    name: id.name().into(),
                    passed,
                    details: json!({ "initial": d }),
                }
            }
            CheckId::Evolution => evolution_check(s, cfg, c)?,
            CheckId::MetricCrosscheck => metric_check(s, cfg)?,
            _ => unreachable!("static checks only"),
        });
        timings.insert(format!("check_{}", id.name()), t0.elapsed().as_secs_f64());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// the run

struct Session<'a> {
    cfg: &'a RunConfig,
    dir: PathBuf,
    g0: MetricField<f64>,
    progress: RunProgress,
    timings: BTreeMap<String, f64>,
}

fn shift_for(cfg: &RunConfig, s: &State) -> Result<f64, RunError> {
    Ok(match cfg.pinching.c {
        ShiftPolicy::Auto => pinching::auto_shift(s.curvature()?.scalar.min()),
        ShiftPolicy::Fixed(c) => c,
    })
}

impl<'a> Session<'a> {
    fn fresh(
        cfg: &'a RunConfig,
        s0: &State,
        timings: BTreeMap<String, f64>,
        preflow: Vec<CheckRecord>,
        c: f64,
    ) -> Result<Self, RunError> {
        let st = s0.structure()?;
        let b = s0.curvature()?;
        let ric0_max = b.ric.max_abs();
        let f2 = pinching::pinching_f(b, &st.metric, &PinchingConfig::new(c, 2.0)?)?;
        let v = &cfg.checks.tolerances.verify;
        let scalar_bound =
            (cfg.checks.tolerances.scalar_factor * v.spatial(st.grid().h_max()) * ric0_max)
                .max(v.static_abs);
        let progress = RunProgress {
            version: PROGRESS_VERSION,
            physics_hash: cfg.physics_hash(),
            step: 0,
            t: 0.0,
            c,
            ric0_max,
            c1_small: f2.max().sqrt(),
            scalar_bound,
            periods0: flow::period_integrals(s0.phi()),
            last_volume: st.hitchin_volume(),
            carry: MonitorCarry::default(),
            history: Vec::new(),
            inequality: Vec::new(),
            tracks: Tracks::default(),
            preflow,
            rows: Vec::new(),
        };
        Ok(Session {
            cfg,
            dir: cfg.output.dir.clone(),
            g0: st.metric.clone(),
            progress,
            timings,
        })
    }

    /// Evaluates the monitors at `s` and appends its CSV row.
    fn record(&mut self, s: &State, dt: f64, rejections: u32) -> Result<(), RunError> {
        let cfg = self.cfg;
        let p = &mut self.progress;
        let k = s.step_index();
        let st = s.structure()?;
        let b = s.curvature()?;
        let sample = pinching::sample(b, &st.metric, p.c, &cfg.pinching.gammas)?;
        let volume = st.hitchin_volume();
        let distortion = pinching::metric_distortion(&self.g0, &st.metric);
        let rep = p.carry.record(s.t(), &sample, volume, distortion);
        let closed = s.closedness();
        let drift = flow::period_drift(&p.periods0, &flow::period_integrals(s.phi()));
        let every = cfg.pinching.inequality_every;
        let ineq = if cfg.checks.on(CheckId::PinchingInequality) && every > 0 && k % every == 0 {
            let x = pinching_inequality_sample(s, p.c)?;
            p.inequality.push(x.clone());
            Some(x)
        } else {
            None
        };
        bump(&mut p.tracks.closedness, closed, k);
        bump(&mut p.tracks.period_drift, drift, k);
        bump(&mut p.tracks.max_r, rep.max_r, k);
        if k > 0 || !p.rows.is_empty() {
            bump(
                &mut p.tracks.volume_drop,
                (p.last_volume - volume) / p.last_volume,
                k,
            );
        }
        p.last_volume = volume;
        let mut row = vec![k.to_string(), num(s.t()), num(dt), rejections.to_string()];
        row.extend([rep.min_r, rep.max_r, rep.min_r + p.c].map(num));
        row.extend(rep.f_max.iter().map(|&x| num(x)));
        row.extend(
            [
                rep.w_c1_max,
                rep.hitchin_volume,
                closed,
                drift,
                rep.e_norm_max,
                rep.ratio_lhs,
                rep.ratio_rhs_driver,
                rep.metric_distortion,
                rep.distortion_bound,
            ]
            .map(num),
        );
        match &ineq {
            Some(x) => row.extend([num(x.minimal_c), num(x.sup_ratio)]),
            None => row.extend([String::new(), String::new()]),
        }
        p.rows.push(row.join(","));
        p.history.push(rep);
        p.step = k;
        p.t = s.t();
        Ok(())
    }

    fn csv(&self) -> String {
        let mut s = columns(&self.cfg.pinching.gammas).join(",");
        s.push('\n');
        for r in &self.progress.rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    fn write_csv(&self) -> Result<(), RunError> {
        let path = self.dir.join("timeseries.csv");
        write_atomic(&path, self.csv().as_bytes()).map_err(io_err(&path))
    }

    fn save_snapshot(&self, s: &State) -> Result<(), RunError> {
        let path = self
            .dir
            .join("snapshots")
            .join(snapshot_name(s.step_index()));
        snapshot::save(s, &path).map_err(snap_err(&path))?;
        write_json(&progress_path(&path), &self.progress)?;
        self.write_csv()
    }

    /// Steps until the configured count, recording every state.
    fn advance(&mut self, mut s: State) -> Result<State, RunError> {
        let every = self.cfg.output.snapshot_every;
        let t0 = Instant::now();
        while s.step_index() < self.cfg.flow.steps {
            let (next, info) = flow::step(&s, &self.cfg.flow.policy)?;
            s = next;
            self.record(&s, info.dt, info.rejections)?;
            if every > 0 && s.step_index() % every == 0 && s.step_index() < self.cfg.flow.steps {
                self.save_snapshot(&s)?;
            }
        }
        *self.timings.entry("flow".into()).or_default() += t0.elapsed().as_secs_f64();
        Ok(s)
    }

    fn finish(&mut self, last: &State) -> Result<Verification, RunError> {
        let t0 = Instant::now();
        let cfg = self.cfg;
        let tol = &cfg.checks.tolerances;
        let p = &self.progress;
        let mut checks = Vec::new();
        for id in CheckId::ALL.into_iter().filter(|c| cfg.checks.on(*c)) {
            let rec = match id {
                CheckId::Structure => {
                    let pre = p
                        .preflow
                        .iter()
                        .find(|r| r.name == id.name())
                        .expect("structure ran before the flow");
                    let (ok, fin) = structure_details(last, cfg)?;
                    CheckRecord {
                        name: id.name().into(),
                        passed: pre.passed && ok,
                        details: json!({ "initial": pre.details["initial"], "final": fin }),
                    }
                }
                id if id.is_static() => p
                    .preflow
                    .iter()
                    .find(|r| r.name == id.name())
                    .expect("ran before the flow")
                    .clone(),
                CheckId::Closedness => {
                    let (c, d) = (p.tracks.closedness, p.tracks.period_drift);
                    CheckRecord {
                        name: id.name().into(),
                        passed: c.map_or(true, |w| w.value <= tol.closedness)
                            && d.map_or(true, |w| w.value <= tol.period_drift),
                        details: json!({
                            "max_closedness": c,
                            "closedness_bound": tol.closedness,
                            "max_period_drift": d,
                            "period_drift_bound": tol.period_drift,
                        }),
                    }
                }
                CheckId::Volume => {
                    let w = p.tracks.volume_drop;
                    CheckRecord {
                        name: id.name().into(),
                        passed: w.map_or(true, |w| w.value <= tol.volume_slack),
                        details: json!({ "max_relative_decrease": w, "slack": tol.volume_slack }),
                    }
                }
                CheckId::ScalarSign => {
                    let w = p.tracks.max_r;
                    CheckRecord {
                        name: id.name().into(),
                        passed: w.map_or(true, |w| w.value <= p.scalar_bound),
                        details: json!({ "max_r": w, "bound": p.scalar_bound, "max_ricci_initial": p.ric0_max }),
                    }
                }
                CheckId::PinchingFit => {
                    let fit = pinching::fit_einstein_ratio(&p.history, p.c1_small);
                    // a margin may land a rounding error below zero when a
                    // record sits exactly on the fitted curve
                    let worst = p
                        .history
                        .iter()
                        .zip(&fit.margins)
                        .map(|(r, m)| m / r.ratio_lhs.max(1.0))
                        .fold(f64::INFINITY, f64::min);
                    let finite = p
                        .history
                        .iter()
                        .all(|r| r.f_max.iter().all(|x| x.is_finite()));
                    CheckRecord {
                        name: id.name().into(),
                        passed: finite && worst >= -tol.verify.algebraic,
                        details: json!({
                            "f_finite": finite,
                            "c1_small": fit.c1_small,
                            "c1": fit.c1,
                            "c2": fit.c2,
                            "min_margin": fit.min_margin(),
                            "min_relative_margin": worst,
                        }),
                    }
                }
                CheckId::PinchingInequality => {
                    let series: Vec<f64> = p.inequality.iter().map(|x| x.minimal_c).collect();
                    let ratio = stability_ratio(&series);
                    let excluded = p
                        .inequality
                        .iter()
                        .map(|x| x.excluded_excess)
                        .fold(f64::NEG_INFINITY, f64::max);
                    CheckRecord {
                        name: id.name().into(),
                        passed: ratio <= tol.stability_ratio,
                        details: json!({
                            "samples": p.inequality.len(),
                            "minimal_c": series,
                            "sup_ratio": p.inequality.iter().map(|x| x.sup_ratio).collect::<Vec<_>>(),
                            "stability_ratio": ratio,
                            "bound": tol.stability_ratio,
                            "max_excluded_excess": if excluded.is_finite() { json!(excluded) } else { Value::Null },
                        }),
                    }
                }
                _ => unreachable!(),
            };
            checks.push(rec);
        }
        let weyl_rate = cfg.pinching.blowup_time.map(|t_est| {
            match pinching::weyl_rate_series(&p.history, t_est, cfg.pinching.delta) {
                Ok(r) => json!({ "blowup_time": t_est, "delta": cfg.pinching.delta, "rate": r }),
                Err(e) => json!({ "blowup_time": t_est, "error": e.to_string() }),
            }
        });
        self.timings
            .insert("final_checks".into(), t0.elapsed().as_secs_f64());
        Ok(Verification {
            passed: checks.iter().all(|c| c.passed),
            steps: p.step,
            final_t: p.t,
            c: p.c,
            checks,
            weyl_rate,
        })
    }
}

fn prepare_dir(dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(dir.join("snapshots")).map_err(io_err(dir))?;
    let stale = dir.join("error.json");
    if stale.exists() {
        fs::remove_file(&stale).map_err(io_err(&stale))?;
    }
    Ok(())
}

struct Meta<'a> {
    command: &'a str,
    started: f64,
    resumed_from: Option<PathBuf>,
}

fn write_manifest(
    cfg: &RunConfig,
    meta: &Meta,
    exit_code: i32,
    timings: BTreeMap<String, f64>,
) -> Result<(), RunError> {
    let status = match exit_code {
        0 => "passed",
        1 => "failed",
        2 => "config_error",
        _ => "runtime_error",
    };
    let m = Manifest {
        command: meta.command.into(),
        status: status.into(),
        exit_code,
        config: cfg.to_toml(),
        config_hash: cfg.hash(),
        physics_hash: cfg.physics_hash(),
        versions: Versions::default(),
        columns: columns(&cfg.pinching.gammas),
        threads: rayon::current_num_threads(),
        resumed_from: meta.resumed_from.clone(),
        started_unix: meta.started,
        finished_unix: now(),
        timings,
    };
    write_json(&cfg.output.dir.join("manifest.json"), &m)
}

/// Records a failure in the output directory (best effort) and passes the
/// error on.
fn fail(cfg: &RunConfig, meta: &Meta, err: RunError, session: Option<&Session>) -> RunError {
    if fs::create_dir_all(&cfg.output.dir).is_ok() {
        let _ = write_json(&cfg.output.dir.join("error.json"), &err.record());
        if let Some(s) = session {
            let _ = s.write_csv();
        }
        let timings = session.map(|s| s.timings.clone()).unwrap_or_default();
        let _ = write_manifest(cfg, meta, err.exit_code(), timings);
    }
    err
}

fn complete(session: &mut Session, last: &State, meta: &Meta) -> Result<Outcome, RunError> {
    session.save_snapshot(last)?;
    let verification = session.finish(last)?;
    write_json(&session.dir.join("verification.json"), &verification)?;
    if session.cfg.output.plots {
        report::write_plots(&session.dir, &session.csv())?;
    }
    let exit_code = if verification.passed { 0 } else { 1 };
    write_manifest(session.cfg, meta, exit_code, session.timings.clone())?;
    Ok(Outcome {
        exit_code,
        dir: session.dir.clone(),
        verification,
    })
}

/// Runs the configured flow from its initial data.
pub fn run(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let meta = Meta {
        command: "run",
        started: now(),
        resumed_from: None,
    };
    let mut session: Option<Session> = None;
    let r = (|| {
        prepare_dir(&cfg.output.dir)?;
        let s0 = initial_state(cfg)?;
        let c = shift_for(cfg, &s0)?;
        let mut timings = BTreeMap::new();
        let pre = preflow(&s0, cfg, c, &mut timings)?;
        let s = session.insert(Session::fresh(cfg, &s0, timings, pre, c)?);
        s.record(&s0, 0.0, 0)?;
        s.save_snapshot(&s0)?;
        let last = s.advance(s0)?;
        complete(s, &last, &meta)
    })();
    r.map_err(|e| fail(cfg, &meta, e, session.as_ref()))
}

/// Static checks only (no flow); writes the manifest and verification.json.
pub fn verify(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let meta = Meta {
        command: "verify",
        started: now(),
        resumed_from: None,
    };
    let r = (|| {
        prepare_dir(&cfg.output.dir)?;
        let s0 = initial_state(cfg)?;
        let c = shift_for(cfg, &s0)?;
        let mut timings = BTreeMap::new();
        let checks = preflow(&s0, cfg, c, &mut timings)?;
        let verification = Verification {
            passed: checks.iter().all(|c| c.passed),
            steps: 0,
            final_t: 0.0,
            c,
            checks,
            weyl_rate: None,
        };
        write_json(&cfg.output.dir.join("verification.json"), &verification)?;
        let exit_code = if verification.passed { 0 } else { 1 };
        write_manifest(cfg, &meta, exit_code, timings)?;
        Ok(Outcome {
            exit_code,
            dir: cfg.output.dir.clone(),
            verification,
        })
    })();
    r.map_err(|e| fail(cfg, &meta, e, None))
}

/// Continues a run from `snap`, which must sit in a `snapshots/` directory
/// next to its progress sidecar and the run's initial snapshot.
pub fn resume(snap: &Path, cfg: &RunConfig) -> Result<Outcome, RunError> {
    let meta = Meta {
        command: "resume",
        started: now(),
        resumed_from: Some(snap.to_path_buf()),
    };
    let mut session: Option<Session> = None;
    let r = (|| {
        let progress: RunProgress = read_json(&progress_path(snap))?;
        if progress.version != PROGRESS_VERSION {
            return Err(RunError::Resume(format!(
                "progress format {} (expected {PROGRESS_VERSION})",
                progress.version
            )));
        }
        if progress.physics_hash != cfg.physics_hash() {
            return Err(RunError::Resume(
                "configuration differs from the one that produced the snapshot".into(),
            ));
        }
        if progress.step > cfg.flow.steps {
            return Err(RunError::Resume(format!(
                "snapshot is at step {} beyond flow.steps = {}",
                progress.step, cfg.flow.steps
            )));
        }
        let state: State = snapshot::load(snap).map_err(snap_err(snap))?;
        if state.step_index() != progress.step || state.t() != progress.t {
            return Err(RunError::Resume(
                "snapshot and progress record disagree".into(),
            ));
        }
        let first = snap.with_file_name(snapshot_name(0));
        let s0: State = snapshot::load(&first).map_err(snap_err(&first))?;
        let grid = GridSpec::new(cfg.grid.shape, cfg.grid.periods)?;
        snapshot::check_grid(&state, &grid).map_err(|e| RunError::Resume(e.to_string()))?;
        prepare_dir(&cfg.output.dir)?;
        let copy = cfg.output.dir.join("snapshots").join(snapshot_name(0));
        if fs::canonicalize(&first).ok() != fs::canonicalize(&copy).ok() {
            let bytes = fs::read(&first).map_err(io_err(&first))?;
            write_atomic(&copy, &bytes).map_err(io_err(&copy))?;
        }
        let g0 = s0.structure()?.metric.clone();
        let s = session.insert(Session {
            cfg,
            dir: cfg.output.dir.clone(),
            g0,
            progress,
            timings: BTreeMap::new(),
        });
        let last = s.advance(state)?;
        complete(s, &last, &meta)
    })();
    r.map_err(|e| fail(cfg, &meta, e, session.as_ref()))
}
