//! Run configuration: a TOML document, validated in one pass so that every
//! violation is reported together.
//!
//! ```toml
//! seed = 0                       # optional
//!
//! [grid]
//! n = 32                         # points per active axis, or
//! # shape = [32, 32, 1, 1, 1, 1, 1]
//! active = [1, 2]                # 1-based axis numbers, used with `n`
//! # periods = [6.283185307179586, ...]   (default 2π on every axis)
//!
//! [initial]
//! kind = "perturbed"             # "flat" | "perturbed" | "snapshot"
//! epsilon = 0.05
//! modes = [1, 1]
//! amplitudes = [1.0, 0.5, 0.25]
//! # path = "run/snapshots/step_000100.g2snap"   (kind = "snapshot")
//!
//! [flow]
//! steps = 100
//! safety = 0.5
//! dt_floor = 1e-10
//! max_dt = 1.0
//! # fixed_dt = 1e-3
//!
//! [pinching]
//! c = "auto"                     # or a positive number
//! gammas = [2.0]
//! inequality_every = 10          # 0 disables the inequality samples
//! # blowup_time = 5.0
//! delta = 0.5
//!
//! [checks]
//! enabled = ["pointwise", "structure", ...]   (default: all)
//! evolution = ["all"]
//! pullback_samples = 1000
//! [checks.tolerances]
//! closedness = 1e-12
//!
//! [output]
//! dir = "out/run1"
//! plots = true
//! snapshot_every = 0             # 0: only the initial and final states
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use g2flow::evolution::{EvolutionCheck, VerifyTolerances};
use g2flow::flow::StepPolicy;
use g2flow::initial::Perturbation;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

pub const SCHEMA_VERSION: i64 = 1;
pub const DEFAULT_STEPS: u64 = 100;

/// Every problem found in one configuration document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub violations: Vec<String>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} configuration error(s):", self.violations.len())?;
        for v in &self.violations {
            write!(f, "\n  - {v}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckId {
    /// Contraction identities on φ₀ and on random linear pullbacks.
    Pointwise,
    /// Torsion/curvature identities on the first and last state.
    Structure,
    /// Evolution equations by time differences at the initial state.
    Evolution,
    /// The velocity of g against −2S.
    MetricCrosscheck,
    /// ‖dφ‖∞ and period integrals along the run.
    Closedness,
    /// Hitchin volume never decreases.
    Volume,
    /// max R stays below the discretisation floor.
    ScalarSign,
    /// The Einstein-ratio fit has non-negative margin.
    PinchingFit,
    /// Minimal constant of the pinching inequality is stable in time.
    PinchingInequality,
}

impl CheckId {
    pub const ALL: [CheckId; 9] = [
        CheckId::Pointwise,
        CheckId::Structure,
        CheckId::Evolution,
        CheckId::MetricCrosscheck,
        CheckId::Closedness,
        CheckId::Volume,
        CheckId::ScalarSign,
        CheckId::PinchingFit,
        CheckId::PinchingInequality,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckId::Pointwise => "pointwise",
            CheckId::Structure => "structure",
            CheckId::Evolution => "evolution",
            CheckId::MetricCrosscheck => "metric_crosscheck",
            CheckId::Closedness => "closedness",
            CheckId::Volume => "volume",
            CheckId::ScalarSign => "scalar_sign",
            CheckId::PinchingFit => "pinching_fit",
            CheckId::PinchingInequality => "pinching_inequality",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Checks that need no flow run.
    pub fn is_static(self) -> bool {
        matches!(
            self,
            CheckId::Pointwise
                | CheckId::Structure
                | CheckId::Evolution
                | CheckId::MetricCrosscheck
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub shape: [usize; 7],
    pub periods: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConfig {
    Flat,
    Perturbed(Perturbation),
    Snapshot { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub steps: u64,
    pub policy: StepPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPolicy {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinchingSection {
    pub c: ShiftPolicy,
    pub gammas: Vec<f64>,
    pub inequality_every: u64,
    pub blowup_time: Option<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub closedness: f64,
    pub period_drift: f64,
    pub volume_slack: f64,
    /// max R ≤ scalar_factor · space_coeff·h⁴ · max|Ric(0)|.
    pub scalar_factor: f64,
    pub pointwise_relative: f64,
    pub stability_ratio: f64,
    pub metric_velocity: f64,
    pub verify: VerifyTolerances,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            closedness: 1e-12,
            period_drift: 1e-10,
            volume_slack: 1e-10,
            scalar_factor: 10.0,
            pointwise_relative: 1e-8,
            stability_ratio: 10.0,
            metric_velocity: 1e-2,
            verify: VerifyTolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChecksConfig {
    pub enabled: BTreeSet<CheckId>,
    /// Evolution identities by name; empty means all.
    pub evolution: Vec<String>,
    pub pullback_samples: usize,
    pub tolerances: Tolerances,
}

impl ChecksConfig {
    pub fn on(&self, c: CheckId) -> bool {
        self.enabled.contains(&c)
    }

    pub fn evolution_checks(&self, gammas: &[f64]) -> Vec<EvolutionCheck> {
        if self.evolution.is_empty() {
            return EvolutionCheck::all(gammas);
        }
        self.evolution
            .iter()
            .filter_map(|n| EvolutionCheck::parse(n, gammas))
            .flatten()
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub plots: bool,
    pub snapshot_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub initial: InitialConfig,
    pub flow: FlowConfig,
    pub pinching: PinchingSection,
    pub checks: ChecksConfig,
    pub output: OutputConfig,
}

/// Collects violations while walking the document.
struct Walker {
    errors: Vec<String>,
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

impl Walker {
    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn unknown(&mut self, t: &Table, path: &str, allowed: &[&str]) {
        for k in t.keys() {
            if !allowed.contains(&k.as_str()) {
                let at = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                self.err(format!("unknown key `{at}`"));
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, key: &str, path: &str) -> Option<&'a Table> {
        match t.get(key) {
            None => None,
            Some(Value::Table(x)) => Some(x),
            Some(v) => {
                self.err(format!(
                    "`{}` must be a table, found {}",
                    join(path, key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn float(&mut self, t: &Table, key: &str, path: &str) -> Option<f64> {
        match t.get(key)? {
            Value::Float(x) => Some(*x),
            Value::Integer(i) => Some(*i as f64),
            v => {
                self.err(format!(
                    "`{}` must be a number, found {}",
                    join(path, key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn positive(&mut self, t: &Table, key: &str, path: &str, default: f64) -> f64 {
        match self.float(t, key, path) {
            Some(x) if x > 0.0 && x.is_finite() => x,
            Some(x) => {
                self.err(format!(
                    "`{}` must be positive and finite, got {x}",
                    join(path, key)
                ));
                default
            }
            None => default,
        }
    }

    fn uint(&mut self, t: &Table, key: &str, path: &str) -> Option<u64> {
        match t.get(key)? {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::Integer(i) => {
                self.err(format!(
                    "`{}` must be non-negative, got {i}",
                    join(path, key)
                ));
                None
            }
            v => {
                self.err(format!(
                    "`{}` must be an integer, found {}",
                    join(path, key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn boolean(&mut self, t: &Table, key: &str, path: &str) -> Option<bool> {
        match t.get(key)? {
            Value::Boolean(b) => Some(*b),
            v => {
                self.err(format!(
                    "`{}` must be a boolean, found {}",
                    join(path, key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn string(&mut self, t: &Table, key: &str, path: &str) -> Option<String> {
        match t.get(key)? {
            Value::String(s) => Some(s.clone()),
            v => {
                self.err(format!(
                    "`{}` must be a string, found {}",
                    join(path, key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn array<'a>(&mut self, t: &'a Table, key: &str, path: &str) -> Option<&'a Vec<Value>> {
        match t.get(key)? {
            Value::Array(a) => Some(a),
            v => {
                self.err(format!(
                    "`{}` must be an array, found {}",
                    join(path, key),
                    type_name(v)
                ));
                None
            }
        }
    }

    fn float_list(&mut self, t: &Table, key: &str, path: &str) -> Option<Vec<f64>> {
        let a = self.array(t, key, path)?;
        let mut out = Vec::new();
        for (i, v) in a.iter().enumerate() {
            match v {
                Value::Float(x) => out.push(*x),
                Value::Integer(x) => out.push(*x as f64),
                v => {
                    self.err(format!(
                        "`{}[{i}]` must be a number, found {}",
                        join(path, key),
                        type_name(v)
                    ));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn uint_list(&mut self, t: &Table, key: &str, path: &str) -> Option<Vec<u64>> {
        let a = self.array(t, key, path)?;
        let mut out = Vec::new();
        for (i, v) in a.iter().enumerate() {
            match v {
                Value::Integer(x) if *x >= 0 => out.push(*x as u64),
                v => {
                    self.err(format!(
                        "`{}[{i}]` must be a non-negative integer, found {}",
                        join(path, key),
                        describe(v)
                    ));
                    return None;
                }
            }
        }
        Some(out)
    }

    fn string_list(&mut self, t: &Table, key: &str, path: &str) -> Option<Vec<String>> {
        let a = self.array(t, key, path)?;
        let mut out = Vec::new();
        for (i, v) in a.iter().enumerate() {
            match v {
                Value::String(s) => out.push(s.clone()),
                v => {
                    self.err(format!(
                        "`{}[{i}]` must be a string, found {}",
                        join(path, key),
                        type_name(v)
                    ));
                    return None;
                }
            }
        }
        Some(out)
    }
}

fn describe(v: &Value) -> String {
    match v {
        Value::Integer(i) => i.to_string(),
        v => type_name(v).to_string(),
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Parses with relative paths resolved against the working directory.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    parse_config_at(text, Path::new("."))
}

/// Parses and validates; relative paths are resolved against `base`.
pub fn parse_config_at(text: &str, base: &Path) -> Result<RunConfig, ConfigError> {
    // syntax errors, including duplicate keys, come straight from the parser
    let doc: Table = text.parse().map_err(|e: toml::de::Error| ConfigError {
        violations: vec![format!("TOML: {}", e.message().trim())],
    })?;
    let mut w = Walker { errors: Vec::new() };
    w.unknown(
        &doc,
        "",
        &[
            "schema", "seed", "grid", "initial", "flow", "pinching", "checks", "output",
        ],
    );
    if let Some(s) = doc.get("schema") {
        if s.as_integer() != Some(SCHEMA_VERSION) {
            w.err(format!("`schema` must be {SCHEMA_VERSION}"));
        }
    }
    let seed = w.uint(&doc, "seed", "").unwrap_or(0);

    let empty = Table::new();
    let grid_t = w.table(&doc, "grid", "");
    if grid_t.is_none() && !doc.contains_key("grid") {
        w.err("missing required section `[grid]`".into());
    }
    let grid = parse_grid(&mut w, grid_t.unwrap_or(&empty), grid_t.is_some());

    let init_t = w.table(&doc, "initial", "");
    if init_t.is_none() && !doc.contains_key("initial") {
        w.err("missing required section `[initial]`".into());
    }
    let initial = parse_initial(&mut w, init_t.unwrap_or(&empty), init_t.is_some(), base);

    let flow_t = w.table(&doc, "flow", "").unwrap_or(&empty);
    w.unknown(
        flow_t,
        "flow",
        &["steps", "safety", "dt_floor", "max_dt", "fixed_dt"],
    );
    let d = StepPolicy::default();
    let flow = FlowConfig {
        steps: w.uint(flow_t, "steps", "flow").unwrap_or(DEFAULT_STEPS),
        policy: StepPolicy {
            safety: w.positive(flow_t, "safety", "flow", d.safety),
            dt_floor: w.positive(flow_t, "dt_floor", "flow", d.dt_floor),
            max_dt: w.positive(flow_t, "max_dt", "flow", d.max_dt),
            fixed_dt: flow_t
                .contains_key("fixed_dt")
                .then(|| w.positive(flow_t, "fixed_dt", "flow", 1.0)),
        },
    };

    let pin_t = w.table(&doc, "pinching", "").unwrap_or(&empty);
    let pinching = parse_pinching(&mut w, pin_t);

    let chk_t = w.table(&doc, "checks", "").unwrap_or(&empty);
    let checks = parse_checks(&mut w, chk_t, &pinching.gammas);

    let out_t = w.table(&doc, "output", "");
    if out_t.is_none() && !doc.contains_key("output") {
        w.err("missing required section `[output]`".into());
    }
    let out_t = out_t.unwrap_or(&empty);
    w.unknown(out_t, "output", &["dir", "plots", "snapshot_every"]);
    let dir = match w.string(out_t, "dir", "output") {
        Some(d) if !d.is_empty() => base.join(d),
        Some(_) => {
            w.err("`output.dir` must not be empty".into());
            PathBuf::new()
        }
        None => {
            if !out_t.contains_key("dir") && doc.contains_key("output") {
                w.err("missing required key `output.dir`".into());
            }
            PathBuf::new()
        }
    };
    let output = OutputConfig {
        dir,
        plots: w.boolean(out_t, "plots", "output").unwrap_or(true),
        snapshot_every: w.uint(out_t, "snapshot_every", "output").unwrap_or(0),
    };

    if w.errors.is_empty() {
        Ok(RunConfig {
            seed,
            grid,
            initial,
            flow,
            pinching,
            checks,
            output,
        })
    } else {
        Err(ConfigError {
            violations: w.errors,
        })
    }
}

fn parse_grid(w: &mut Walker, t: &Table, present: bool) -> GridConfig {
    w.unknown(t, "grid", &["n", "active", "shape", "periods"]);
    let mut shape = [1usize; 7];
    match (t.contains_key("shape"), t.contains_key("n")) {
        (true, true) => w.err("`grid.shape` and `grid.n` are mutually exclusive".into()),
        (true, false) => {
            if t.contains_key("active") {
                w.err("`grid.active` only applies together with `grid.n`".into());
            }
            if let Some(s) = w.uint_list(t, "shape", "grid") {
                if s.len() != 7 {
                    w.err(format!("`grid.shape` needs 7 entries, got {}", s.len()));
                } else {
                    for (a, &n) in s.iter().enumerate() {
                        shape[a] = n as usize;
                    }
                }
            }
        }
        (false, true) => {
            // an invalid n is reported once, not again per axis
            let n = w.uint(t, "n", "grid").map(|n| n as usize);
            let active = w
                .uint_list(t, "active", "grid")
                .unwrap_or_else(|| vec![1, 2]);
            let mut seen = BTreeSet::new();
            for &a in &active {
                if !(1..=7).contains(&a) {
                    w.err(format!(
                        "`grid.active` entries are axis numbers 1..=7, got {a}"
                    ));
                } else if !seen.insert(a) {
                    w.err(format!("`grid.active` lists axis {a} twice"));
                } else if let Some(n) = n {
                    shape[a as usize - 1] = n;
                }
            }
        }
        (false, false) => {
            if present {
                w.err("missing required key `grid.n` (or `grid.shape`)".into());
            }
        }
    }
    for (a, &n) in shape.iter().enumerate() {
        if n == 0 {
            w.err(format!("grid axis {} has no points", a + 1));
        } else if n > 1 && n < 5 {
            w.err(format!(
                "grid axis {} has {n} points; active axes need at least 5",
                a + 1
            ));
        }
    }
    let mut periods = [std::f64::consts::TAU; 7];
    if let Some(p) = w.float_list(t, "periods", "grid") {
        if p.len() != 7 {
            w.err(format!("`grid.periods` needs 7 entries, got {}", p.len()));
        } else {
            for (a, &x) in p.iter().enumerate() {
                if x > 0.0 && x.is_finite() {
                    periods[a] = x;
                } else {
                    w.err(format!("`grid.periods[{a}]` must be positive, got {x}"));
                }
            }
        }
    }
    GridConfig { shape, periods }
}

fn parse_initial(w: &mut Walker, t: &Table, present: bool, base: &Path) -> InitialConfig {
    let kind = w.string(t, "kind", "initial");
    if kind.is_none() && present && !t.contains_key("kind") {
        w.err("missing required key `initial.kind`".into());
    }
    match kind.as_deref() {
        Some("flat") => {
            w.unknown(t, "initial", &["kind"]);
            InitialConfig::Flat
        }
        Some("perturbed") => {
            w.unknown(t, "initial", &["kind", "epsilon", "modes", "amplitudes"]);
            let d = Perturbation::default();
            let epsilon = match w.float(t, "epsilon", "initial") {
                Some(e) if e >= 0.0 && e.is_finite() => e,
                Some(e) => {
                    w.err(format!("`initial.epsilon` must be ≥ 0, got {e}"));
                    d.epsilon
                }
                None => d.epsilon,
            };
            let modes = match w.uint_list(t, "modes", "initial") {
                Some(m) if m.len() > 2 => {
                    w.err(format!(
                        "`initial.modes` takes at most 2 wavenumbers, got {}",
                        m.len()
                    ));
                    d.modes.clone()
                }
                Some(m) => m.into_iter().map(|x| x as u32).collect(),
                None => d.modes.clone(),
            };
            let amplitudes = match w.float_list(t, "amplitudes", "initial") {
                Some(a) if a.len() == 3 => [a[0], a[1], a[2]],
                Some(a) => {
                    w.err(format!(
                        "`initial.amplitudes` needs 3 entries, got {}",
                        a.len()
                    ));
                    d.amplitudes
                }
                None => d.amplitudes,
            };
            InitialConfig::Perturbed(Perturbation {
                epsilon,
                modes,
                amplitudes,
            })
        }
        Some("snapshot") => {
            w.unknown(t, "initial", &["kind", "path"]);
            match w.string(t, "path", "initial") {
                Some(p) => {
                    let path = base.join(p);
                    if !path.is_file() {
                        w.err(format!(
                            "`initial.path` does not name a file: {}",
                            path.display()
                        ));
                    }
                    InitialConfig::Snapshot { path }
                }
                None => {
                    if !t.contains_key("path") {
                        w.err("missing required key `initial.path` for kind \"snapshot\"".into());
                    }
                    InitialConfig::Flat
                }
            }
        }
        Some(other) => {
            w.err(format!(
                "`initial.kind` must be \"flat\", \"perturbed\" or \"snapshot\", got {other:?}"
            ));
            InitialConfig::Flat
        }
        None => InitialConfig::Flat,
    }
}

fn parse_pinching(w: &mut Walker, t: &Table) -> PinchingSection {
    w.unknown(
        t,
        "pinching",
        &["c", "gammas", "inequality_every", "blowup_time", "delta"],
    );
    let c = match t.get("c") {
        None => ShiftPolicy::Auto,
        Some(Value::String(s)) if s == "auto" => ShiftPolicy::Auto,
        Some(Value::Float(x)) if *x > 0.0 && x.is_finite() => ShiftPolicy::Fixed(*x),
        Some(Value::Integer(x)) if *x > 0 => ShiftPolicy::Fixed(*x as f64),
        Some(v) => {
            w.err(format!(
                "`pinching.c` must be \"auto\" or a positive number, found {}",
                describe(v)
            ));
            ShiftPolicy::Auto
        }
    };
    let gammas = match w.float_list(t, "gammas", "pinching") {
        Some(g) if g.is_empty() => {
            w.err("`pinching.gammas` must not be empty".into());
            vec![2.0]
        }
        Some(g) => {
            for &x in &g {
                if !(x > 0.0 && x.is_finite()) {
                    w.err(format!(
                        "`pinching.gammas` entries must be positive, got {x}"
                    ));
                }
            }
            g
        }
        None => vec![2.0],
    };
    let blowup_time = t
        .contains_key("blowup_time")
        .then(|| w.positive(t, "blowup_time", "pinching", 1.0));
    let delta = match w.float(t, "delta", "pinching") {
        Some(d) if d > 0.0 && d < 1.0 => d,
        Some(d) => {
            w.err(format!("`pinching.delta` must lie in (0, 1), got {d}"));
            0.5
        }
        None => 0.5,
    };
    PinchingSection {
        c,
        gammas,
        inequality_every: w.uint(t, "inequality_every", "pinching").unwrap_or(10),
        blowup_time,
        delta,
    }
}

fn parse_checks(w: &mut Walker, t: &Table, gammas: &[f64]) -> ChecksConfig {
    w.unknown(
        t,
        "checks",
        &["enabled", "evolution", "pullback_samples", "tolerances"],
    );
    let enabled = match w.string_list(t, "enabled", "checks") {
        Some(list) => {
            let mut set = BTreeSet::new();
            for s in &list {
                match CheckId::parse(s) {
                    Some(c) => {
                        set.insert(c);
                    }
                    None => w.err(format!(
                        "unknown check {s:?} in `checks.enabled` (known: {})",
                        CheckId::ALL.map(|c| c.name()).join(", ")
                    )),
                }
            }
            set
        }
        None => CheckId::ALL.into_iter().collect(),
    };
    let evolution = match w.string_list(t, "evolution", "checks") {
        Some(list) if list.iter().any(|s| s == "all") => {
            if list.len() > 1 {
                w.err("`checks.evolution` = [\"all\"] cannot be combined with names".into());
            }
            Vec::new()
        }
        Some(list) => {
            for n in &list {
                if EvolutionCheck::parse(n, gammas).is_none() {
                    w.err(format!(
                        "unknown evolution identity {n:?} in `checks.evolution`"
                    ));
                }
            }
            list
        }
        None => Vec::new(),
    };
    let pullback_samples = w.uint(t, "pullback_samples", "checks").unwrap_or(1000) as usize;
    let empty = Table::new();
    let tt = w.table(t, "tolerances", "checks").unwrap_or(&empty);
    let p = "checks.tolerances";
    w.unknown(
        tt,
        p,
        &[
            "closedness",
            "period_drift",
            "volume_slack",
            "scalar_factor",
            "pointwise_relative",
            "stability_ratio",
            "metric_velocity",
            "min_time_order",
            "space_coeff",
            "static_abs",
            "algebraic",
        ],
    );
    let d = Tolerances::default();
    let tolerances = Tolerances {
        closedness: w.positive(tt, "closedness", p, d.closedness),
        period_drift: w.positive(tt, "period_drift", p, d.period_drift),
        volume_slack: w.positive(tt, "volume_slack", p, d.volume_slack),
        scalar_factor: w.positive(tt, "scalar_factor", p, d.scalar_factor),
        pointwise_relative: w.positive(tt, "pointwise_relative", p, d.pointwise_relative),
        stability_ratio: w.positive(tt, "stability_ratio", p, d.stability_ratio),
        metric_velocity: w.positive(tt, "metric_velocity", p, d.metric_velocity),
        verify: VerifyTolerances {
            min_time_order: w.positive(tt, "min_time_order", p, d.verify.min_time_order),
            space_coeff: w.positive(tt, "space_coeff", p, d.verify.space_coeff),
            static_abs: w.positive(tt, "static_abs", p, d.verify.static_abs),
            algebraic: w.positive(tt, "algebraic", p, d.verify.algebraic),
        },
    };
    ChecksConfig {
        enabled,
        evolution,
        pullback_samples,
        tolerances,
    }
}

impl RunConfig {
    /// Canonical TOML text that parses back to this configuration (with
    /// absolute paths, so it does not depend on where it is read from).
    pub fn to_toml(&self) -> String {
        let mut doc = Table::new();
        doc.insert("schema".into(), Value::Integer(SCHEMA_VERSION));
        doc.insert("seed".into(), Value::Integer(self.seed as i64));
        let mut grid = Table::new();
        grid.insert(
            "shape".into(),
            Value::Array(
                self.grid
                    .shape
                    .iter()
                    .map(|&n| Value::Integer(n as i64))
                    .collect(),
            ),
        );
        grid.insert("periods".into(), floats(&self.grid.periods));
        doc.insert("grid".into(), Value::Table(grid));
        let mut init = Table::new();
        match &self.initial {
            InitialConfig::Flat => {
                init.insert("kind".into(), "flat".into());
            }
            InitialConfig::Perturbed(p) => {
                init.insert("kind".into(), "perturbed".into());
                init.insert("epsilon".into(), Value::Float(p.epsilon));
                init.insert(
                    "modes".into(),
                    Value::Array(p.modes.iter().map(|&m| Value::Integer(m as i64)).collect()),
                );
                init.insert("amplitudes".into(), floats(&p.amplitudes));
            }
            InitialConfig::Snapshot { path } => {
                init.insert("kind".into(), "snapshot".into());
                init.insert("path".into(), absolute(path).into());
            }
        }
        doc.insert("initial".into(), Value::Table(init));
        let mut flow = Table::new();
        flow.insert("steps".into(), Value::Integer(self.flow.steps as i64));
        flow.insert("safety".into(), Value::Float(self.flow.policy.safety));
        flow.insert("dt_floor".into(), Value::Float(self.flow.policy.dt_floor));
        flow.insert("max_dt".into(), Value::Float(self.flow.policy.max_dt));
        if let Some(dt) = self.flow.policy.fixed_dt {
            flow.insert("fixed_dt".into(), Value::Float(dt));
        }
        doc.insert("flow".into(), Value::Table(flow));
        let mut pin = Table::new();
        pin.insert(
            "c".into(),
            match self.pinching.c {
                ShiftPolicy::Auto => "auto".into(),
                ShiftPolicy::Fixed(x) => Value::Float(x),
            },
        );
        pin.insert("gammas".into(), floats(&self.pinching.gammas));
        pin.insert(
            "inequality_every".into(),
            Value::Integer(self.pinching.inequality_every as i64),
        );
        if let Some(t) = self.pinching.blowup_time {
            pin.insert("blowup_time".into(), Value::Float(t));
        }
        pin.insert("delta".into(), Value::Float(self.pinching.delta));
        doc.insert("pinching".into(), Value::Table(pin));
        let mut chk = Table::new();
        chk.insert(
            "enabled".into(),
            Value::Array(
                self.checks
                    .enabled
                    .iter()
                    .map(|c| Value::String(c.name().into()))
                    .collect(),
            ),
        );
        let evo = if self.checks.evolution.is_empty() {
            vec!["all".to_string()]
        } else {
            self.checks.evolution.clone()
        };
        chk.insert(
            "evolution".into(),
            Value::Array(evo.into_iter().map(Value::String).collect()),
        );
        chk.insert(
            "pullback_samples".into(),
            Value::Integer(self.checks.pullback_samples as i64),
        );
        let tl = &self.checks.tolerances;
        let mut tt = Table::new();
        for (k, v) in [
            ("closedness", tl.closedness),
            ("period_drift", tl.period_drift),
            ("volume_slack", tl.volume_slack),
            ("scalar_factor", tl.scalar_factor),
            ("pointwise_relative", tl.pointwise_relative),
            ("stability_ratio", tl.stability_ratio),
            ("metric_velocity", tl.metric_velocity),
            ("min_time_order", tl.verify.min_time_order),
            ("space_coeff", tl.verify.space_coeff),
            ("static_abs", tl.verify.static_abs),
            ("algebraic", tl.verify.algebraic),
        ] {
            tt.insert(k.into(), Value::Float(v));
        }
        chk.insert("tolerances".into(), Value::Table(tt));
        doc.insert("checks".into(), Value::Table(chk));
        let mut out = Table::new();
        out.insert("dir".into(), absolute(&self.output.dir).into());
        out.insert("plots".into(), Value::Boolean(self.output.plots));
        out.insert(
            "snapshot_every".into(),
            Value::Integer(self.output.snapshot_every as i64),
        );
        doc.insert("output".into(), Value::Table(out));
        toml::to_string(&doc).expect("plain table serialises")
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Hash of everything that determines the computed numbers, i.e. the
    /// canonical text without the output section and the step count.
    pub fn physics_hash(&self) -> String {
        let mut c = self.clone();
        c.output = OutputConfig {
            dir: PathBuf::new(),
            plots: false,
            snapshot_every: 0,
        };
        c.flow.steps = 0;
        c.hash()
    }
}

fn floats(xs: &[f64]) -> Value {
    Value::Array(xs.iter().map(|&x| Value::Float(x)).collect())
}

fn absolute(p: &Path) -> String {
    std::path::absolute(p)
        .unwrap_or_else(|_| p.to_path_buf())
        .to_string_lossy()
        .into_owned()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[grid]\nn = 8\n[initial]\nkind = \"flat\"\n[output]\ndir = \"out\"\n";

    #[test]
    fn minimal_flat_gets_defaults() {
        let c = parse_config(MINIMAL).unwrap();
        assert_eq!(c.flow.steps, 100);
        assert_eq!(c.grid.shape, [8, 8, 1, 1, 1, 1, 1]);
        assert_eq!(c.initial, InitialConfig::Flat);
        assert_eq!(c.pinching.c, ShiftPolicy::Auto);
        assert_eq!(c.pinching.gammas, vec![2.0]);
        assert_eq!(c.checks.enabled.len(), CheckId::ALL.len());
        assert!(c.output.plots);
    }

    #[test]
    fn negative_epsilon_rejected() {
        let t =
            "[grid]\nn = 8\n[initial]\nkind = \"perturbed\"\nepsilon = -1\n[output]\ndir = \"o\"\n";
        let e = parse_config(t).unwrap_err();
        assert_eq!(e.violations.len(), 1);
        assert!(e.violations[0].contains("epsilon"), "{e}");
    }

    #[test]
    fn duplicate_key_names_the_key() {
        let t = "[grid]\nn = 8\nn = 16\n[initial]\nkind = \"flat\"\n[output]\ndir = \"o\"\n";
        let e = parse_config(t).unwrap_err();
        assert!(e.to_string().contains("`n`"), "{e}");
    }

    #[test]
    fn every_violation_is_listed() {
        let t =
            "bogus = 1\n[grid]\nn = 3\nactive = [0, 2]\n[flow]\nsteps = \"many\"\nsafety = -1\n\
                 [pinching]\nc = \"sometimes\"\n[checks]\nenabled = [\"nope\"]\n";
        let e = parse_config(t).unwrap_err();
        let all = e.to_string();
        for needle in [
            "bogus",
            "axis numbers",
            "3 points",
            "flow.steps",
            "flow.safety",
            "pinching.c",
            "nope",
            "[initial]",
            "[output]",
        ] {
            assert!(all.contains(needle), "missing {needle:?} in\n{all}");
        }
        assert!(e.violations.len() >= 9);
    }

    #[test]
    fn unknown_keys_are_errors_in_every_section() {
        let t = "[grid]\nn = 8\nsize = 2\n[initial]\nkind = \"flat\"\nepsilon = 0.1\n[output]\ndir = \"o\"\ncolour = true\n";
        let e = parse_config(t).unwrap_err();
        assert_eq!(e.violations.len(), 3, "{e}");
    }

    #[test]
    fn wrong_types_are_reported() {
        let t = "[grid]\nn = 8.5\n[initial]\nkind = 3\n[output]\ndir = \"o\"\nplots = \"yes\"\n";
        let e = parse_config(t).unwrap_err();
        assert_eq!(e.violations.len(), 3, "{e}");
    }

    #[test]
    fn shape_form_and_one_based_axes_agree() {
        let a = parse_config(
            "[grid]\nn = 8\nactive = [2, 5]\n[initial]\nkind = \"flat\"\n[output]\ndir = \"o\"\n",
        )
        .unwrap();
        let b = parse_config("[grid]\nshape = [1, 8, 1, 1, 8, 1, 1]\n[initial]\nkind = \"flat\"\n[output]\ndir = \"o\"\n").unwrap();
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn canonical_text_round_trips() {
        let t = "seed = 4\n[grid]\nn = 8\n[initial]\nkind = \"perturbed\"\nepsilon = 0.02\n\
                 [flow]\nsteps = 3\nfixed_dt = 0.001\n[pinching]\nc = 1.5\ngammas = [1.5, 2, 3]\nblowup_time = 4.0\n\
                 [checks]\nenabled = [\"closedness\", \"volume\"]\nevolution = [\"ricci_evolution\"]\n[checks.tolerances]\nclosedness = 1e-11\n\
                 [output]\ndir = \"o\"\nplots = false\n";
        let c = parse_config(t).unwrap();
        let again = parse_config(&c.to_toml()).unwrap();
        assert_eq!(again.to_toml(), c.to_toml());
        assert_eq!(again.hash(), c.hash());
        assert_eq!(again.flow.policy.fixed_dt, Some(0.001));
    }

    #[test]
    fn physics_hash_ignores_output_and_length() {
        let a = parse_config(MINIMAL).unwrap();
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        b.flow.steps = 7;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.physics_hash(), b.physics_hash());
    }

    #[test]
    fn missing_snapshot_file_is_a_violation() {
        let t = "[grid]\nn = 8\n[initial]\nkind = \"snapshot\"\npath = \"/nonexistent/x.g2snap\"\n[output]\ndir = \"o\"\n";
        assert!(parse_config(t)
            .unwrap_err()
            .to_string()
            .contains("does not name a file"));
    }
}
