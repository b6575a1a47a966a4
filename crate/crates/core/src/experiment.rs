//! Experiment files: parsing, dispatch to the numerical modules, artifact
//! writing with a run manifest, and the report over finished runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::{self, ActionReport};
use crate::error::Error;
use crate::model::{check_assumptions, DiffusionModel, ModelSpec, Verdict};
use crate::montecarlo::{
    self, estimate_direct, estimate_importance, ft_ratio, tilt_for, EventSpec, FtConfig, McCell, McConfig, McRecord,
    TiltKind,
};
use crate::optimize::{dual_scan, ft_defect, minimize_rate, rate_curve, rate_point, OptimizerConfig};
use crate::paths::{format_float, DiscretePath, TimeGrid};
use crate::simulate::{batch_simulate, Sampler, SimConfig, TiltedDrift, DEFAULT_MAX_RADIUS};

/// Environment variable that sets the worker thread count.
pub const THREADS_ENV: &str = "FWLAB_THREADS";

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Simulate,
    Action,
    Minimize,
    RateCurve,
    Mc,
    FtCheck,
    CheckModel,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Simulate => "simulate",
            TaskKind::Action => "action",
            TaskKind::Minimize => "minimize",
            TaskKind::RateCurve => "rate-curve",
            TaskKind::Mc => "mc",
            TaskKind::FtCheck => "ft-check",
            TaskKind::CheckModel => "check-model",
        }
    }
}

fn default_dt() -> f64 {
    0.01
}

fn default_paths() -> usize {
    100
}

fn default_radius() -> f64 {
    DEFAULT_MAX_RADIUS
}

/// Euler-Maruyama batch, optionally under the orbit tilt for work `tilt_q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateTask {
    pub eps: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub samples: usize,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub tilt_q: Option<f64>,
    /// Number of leading trajectories written in full.
    #[serde(default)]
    pub write_paths: usize,
    #[serde(default = "default_radius")]
    pub max_radius: f64,
}

/// Action and work of path files (`t,x1,..` CSV), relative to the config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionTask {
    pub paths: Vec<PathBuf>,
    /// Noise strength for the Itô correction of the work.
    #[serde(default)]
    pub eps: f64,
}

/// Constrained minimization at `q`, or the unconstrained rate without it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinimizeTask {
    #[serde(default)]
    pub q: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateCurveTask {
    pub q: Vec<f64>,
    /// Also compute `s` through the dual scan.
    #[serde(default)]
    pub dual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McTask {
    pub cells: Vec<McCell>,
    pub event: EventSpec,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub samples: usize,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_radius")]
    pub max_radius: f64,
    #[serde(default)]
    pub importance: bool,
    #[serde(default)]
    pub tilt: TiltKind,
}

fn default_min_hits() -> usize {
    30
}

fn default_ft_delta() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtCheckTask {
    pub eps: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub q: Vec<f64>,
    #[serde(default = "default_ft_delta")]
    pub delta: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub samples: usize,
    #[serde(default = "default_min_hits")]
    pub min_hits: usize,
    #[serde(default)]
    pub tilt: TiltKind,
}

fn default_radii() -> Vec<f64> {
    vec![1.0, 2.0, 4.0, 8.0]
}

fn default_eps0() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckModelTask {
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "default_eps0")]
    pub eps0: f64,
}

impl Default for CheckModelTask {
    fn default() -> Self {
        CheckModelTask {
            radii: default_radii(),
            eps0: default_eps0(),
        }
    }
}

/// One experiment file. Exactly the block of the selected task may be
/// present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub simulate: Option<SimulateTask>,
    #[serde(default)]
    pub action: Option<ActionTask>,
    #[serde(default)]
    pub minimize: Option<MinimizeTask>,
    #[serde(default)]
    pub rate_curve: Option<RateCurveTask>,
    #[serde(default)]
    pub mc: Option<McTask>,
    #[serde(default)]
    pub ft_check: Option<FtCheckTask>,
    #[serde(default)]
    pub check_model: Option<CheckModelTask>,
}

/// Failure of a run, mapped to the process exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    /// Bad configuration or inputs (exit 1).
    Validation(String),
    /// Non-convergence, explosion or infeasibility (exit 2).
    Numerical(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 1,
            RunError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Validation(m) => write!(f, "validation error: {m}"),
            RunError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Io(_) => RunError::Validation(e.to_string()),
            Error::EllipticityViolation { .. } | Error::Explosion { .. } | Error::Infeasible(_) => {
                RunError::Numerical(e.to_string())
            }
        }
    }
}

fn invalid(msg: impl Into<String>) -> RunError {
    RunError::Validation(msg.into())
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Validation(format!("{}: {e}", path.display()))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, RunError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        Ok(cfg)
    }

    fn blocks(&self) -> [(TaskKind, bool); 7] {
        [
            (TaskKind::Simulate, self.simulate.is_some()),
            (TaskKind::Action, self.action.is_some()),
            (TaskKind::Minimize, self.minimize.is_some()),
            (TaskKind::RateCurve, self.rate_curve.is_some()),
            (TaskKind::Mc, self.mc.is_some()),
            (TaskKind::FtCheck, self.ft_check.is_some()),
            (TaskKind::CheckModel, self.check_model.is_some()),
        ]
    }

    /// Schema checks beyond parsing; `base` resolves relative input paths.
    pub fn validate(&self, base: &Path) -> Result<(), RunError> {
        for (kind, present) in self.blocks() {
            if present && kind != self.task {
                return Err(invalid(format!(
                    "block [{}] given for task `{}`",
                    kind.name(),
                    self.task.name()
                )));
            }
        }
        let model = DiffusionModel::from_spec(&self.model)?;
        self.optimizer.validate()?;
        let n = model.dim();
        let check_x0 = |x0: &Option<Vec<f64>>| match x0 {
            Some(x) if x.len() != n => Err(invalid("x0 must match the model dimension")),
            _ => Ok(()),
        };
        match self.task {
            TaskKind::Simulate => {
                let t = self.simulate.as_ref().ok_or_else(|| invalid("task `simulate` needs a [simulate] block"))?;
                check_x0(&t.x0)?;
                SimConfig::new(t.eps, TimeGrid::with_step(t.horizon, t.dt)?, self.seed)?.with_batch(t.samples).validate()?;
                if t.tilt_q.is_some() && !t.tilt_q.unwrap().is_finite() {
                    return Err(invalid("tilt_q must be finite"));
                }
            }
            TaskKind::Action => {
                let t = self.action.as_ref().ok_or_else(|| invalid("task `action` needs an [action] block"))?;
                if t.paths.is_empty() {
                    return Err(invalid("[action] lists no paths"));
                }
                for p in &t.paths {
                    let full = base.join(p);
                    if !full.is_file() {
                        return Err(invalid(format!("path file {} does not exist", full.display())));
                    }
                }
                if !(t.eps >= 0.0) {
                    return Err(invalid("eps must be nonnegative"));
                }
            }
            TaskKind::Minimize => {
                if let Some(q) = self.minimize.as_ref().and_then(|m| m.q) {
                    if !q.is_finite() {
                        return Err(invalid("q must be finite"));
                    }
                }
            }
            TaskKind::RateCurve => {
                let t = self.rate_curve.as_ref().ok_or_else(|| invalid("task `rate-curve` needs a [rate-curve] block"))?;
                if t.q.is_empty() || t.q.iter().any(|q| !q.is_finite()) {
                    return Err(invalid("[rate-curve] q must be a nonempty list of finite numbers"));
                }
            }
            TaskKind::Mc => {
                let t = self.mc.as_ref().ok_or_else(|| invalid("task `mc` needs an [mc] block"))?;
                check_x0(&t.x0)?;
                mc_config(t, self.seed).validate(&model)?;
                t.event.validate(n)?;
                if t.cells.is_empty() {
                    return Err(invalid("[mc] lists no cells"));
                }
                for c in &t.cells {
                    TimeGrid::with_step(c.horizon, t.dt)?;
                    if !(c.eps > 0.0) {
                        return Err(invalid("cell eps must be positive"));
                    }
                }
                if t.importance && !model.has_constant_diffusion() {
                    return Err(invalid("importance sampling needs a constant diffusion matrix"));
                }
            }
            TaskKind::FtCheck => {
                let t = self.ft_check.as_ref().ok_or_else(|| invalid("task `ft-check` needs an [ft-check] block"))?;
                ft_config(t, self.seed, &self.optimizer).mc.validate(&model)?;
                TimeGrid::with_step(t.horizon, t.dt)?;
                if !(t.eps > 0.0) || !(t.delta > 0.0) || t.q.iter().any(|q| !q.is_finite()) || t.q.is_empty() {
                    return Err(invalid("[ft-check] needs eps > 0, delta > 0 and finite q values"));
                }
            }
            TaskKind::CheckModel => {
                let t = self.check_model.clone().unwrap_or_default();
                if t.radii.is_empty() || t.radii.iter().any(|r| !(*r > 0.0)) || !(t.eps0 > 0.0) {
                    return Err(invalid("[check-model] needs positive radii and eps0"));
                }
            }
        }
        Ok(())
    }
}

fn mc_config(t: &McTask, seed: u64) -> McConfig {
    McConfig {
        dt: t.dt,
        samples: t.samples,
        seed,
        x0: t.x0.clone(),
        max_radius: t.max_radius,
    }
}

fn ft_config(t: &FtCheckTask, seed: u64, optimizer: &OptimizerConfig) -> FtConfig {
    FtConfig {
        mc: McConfig {
            dt: t.dt,
            samples: t.samples,
            seed,
            ..McConfig::default()
        },
        min_hits: t.min_hits,
        tilt: t.tilt,
        optimizer: optimizer.clone(),
    }
}

/// Command-line overrides of a config.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub task: TaskKind,
    pub config_sha256: String,
    /// The config text as read, so the run can be repeated from here.
    pub config: String,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub status: String,
    pub message: Option<String>,
    pub files: Vec<FileEntry>,
}

/// Outcome of [`run`]; `error` is set when the task failed after the
/// output directory was created.
#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub summary: Vec<String>,
    pub error: Option<RunError>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.error.as_ref().map_or(0, RunError::exit_code)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Thread count from the argument, else `FWLAB_THREADS`, else rayon's
/// default.
pub fn resolve_threads(threads: Option<usize>) -> Result<usize, RunError> {
    let n = match threads {
        Some(n) => n,
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => v
                .trim()
                .parse()
                .map_err(|_| invalid(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?,
            _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
        },
    };
    if n == 0 {
        return Err(invalid("thread count must be positive"));
    }
    Ok(n)
}

/// Runs `f` on a dedicated pool of `threads` workers.
pub fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| invalid(e.to_string()))?;
    Ok(pool.install(f))
}

/// Collects artifacts in memory-independent order and writes them.
struct Sink {
    dir: PathBuf,
    files: Vec<String>,
    summary: Vec<String>,
}

impl Sink {
    fn create(&mut self, name: &str) -> Result<BufWriter<fs::File>, RunError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
        }
        let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(file))
    }

    fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<fs::File>) -> crate::Result<()>,
    ) -> Result<(), RunError> {
        let mut w = self.create(name)?;
        f(&mut w)?;
        w.flush().map_err(|e| io_error(&self.dir.join(name), e))?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| invalid(e.to_string()))?;
        self.write_with(name, |w| {
            writeln!(w, "{text}")?;
            Ok(())
        })
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }
}

/// Reads, validates and executes an experiment file. Validation failures
/// return `Err` before anything is written; later failures are reported in
/// [`RunOutcome::error`] after partial results and the manifest are on disk.
pub fn run(config_path: &Path, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let text = fs::read_to_string(config_path).map_err(|e| io_error(config_path, e))?;
    let base = config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    run_text(&text, &base, opts)
}

/// [`run`] on config text; relative inputs resolve against `base`.
pub fn run_text(text: &str, base: &Path, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let mut cfg = ExperimentConfig::parse(text)?;
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate(base)?;
    let threads = resolve_threads(opts.threads)?;
    let dir = opts
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("fwlab-out"));
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    let started = now();
    let mut sink = Sink {
        dir: dir.clone(),
        files: Vec::new(),
        summary: Vec::new(),
    };
    let result = with_threads(threads, || execute(&cfg, base, &mut sink))?;
    let error = result.err();
    let mut files = Vec::new();
    for name in &sink.files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
        files.push(FileEntry {
            path: name.clone(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = RunManifest {
        tool: "fwlab".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        task: cfg.task,
        config_sha256: sha256_hex(text.as_bytes()),
        config: text.to_string(),
        seed: cfg.seed,
        threads,
        started_unix: started,
        finished_unix: now(),
        status: match &error {
            None => "ok".into(),
            Some(RunError::Validation(_)) => "invalid".into(),
            Some(RunError::Numerical(_)) => "numerical-failure".into(),
        },
        message: error.as_ref().map(|e| e.to_string()),
        files,
    };
    let tmp = dir.join(format!(".{MANIFEST}.tmp"));
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| invalid(e.to_string()))?;
    fs::write(&tmp, body + "\n").map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, dir.join(MANIFEST)).map_err(|e| io_error(&dir, e))?;
    Ok(RunOutcome {
        dir,
        files: sink.files,
        summary: sink.summary,
        error,
    })
}

#[derive(Serialize)]
struct CurveSummary {
    ft_defect: Option<f64>,
    convexity_violations: Vec<f64>,
    sanity_ok: bool,
    all_converged: bool,
    dual_max_relative_gap: Option<f64>,
}

fn execute(cfg: &ExperimentConfig, base: &Path, sink: &mut Sink) -> Result<(), RunError> {
    let model = DiffusionModel::from_spec(&cfg.model)?;
    match cfg.task {
        TaskKind::Simulate => run_simulate(cfg, &model, sink),
        TaskKind::Action => run_action(cfg, &model, base, sink),
        TaskKind::Minimize => run_minimize(cfg, &model, sink),
        TaskKind::RateCurve => run_rate_curve(cfg, &model, sink),
        TaskKind::Mc => run_mc(cfg, &model, sink),
        TaskKind::FtCheck => run_ft(cfg, &model, sink),
        TaskKind::CheckModel => {
            let t = cfg.check_model.clone().unwrap_or_default();
            let report = check_assumptions(&model, &t.radii, t.eps0);
            for w in &report.warnings {
                sink.note(format!("warning: {w}"));
            }
            sink.note(format!("verdict = {:?}", report.verdict).to_lowercase());
            sink.json("check_model.json", &report)
        }
    }
}

#[derive(Serialize)]
struct SimSummary {
    samples: usize,
    exploded: usize,
    mean_endpoint: Vec<f64>,
    endpoint_second_moment: Vec<f64>,
    mean_w: f64,
    std_error_w: f64,
    mean_weight: Option<f64>,
}

fn run_simulate(cfg: &ExperimentConfig, model: &DiffusionModel, sink: &mut Sink) -> Result<(), RunError> {
    let t = cfg.simulate.as_ref().expect("validated");
    let mut sim = SimConfig::new(t.eps, TimeGrid::with_step(t.horizon, t.dt)?, cfg.seed)?.with_batch(t.samples);
    sim.max_radius = t.max_radius;
    let x0 = t.x0.clone().unwrap_or_else(|| vec![0.0; model.dim()]);
    let tilt = match t.tilt_q {
        Some(q) => {
            let point = rate_point(model, q, &cfg.optimizer)?;
            let measure = point
                .measure
                .filter(|_| !point.infeasible)
                .ok_or_else(|| RunError::Numerical(format!("no loop carries work {q}")))?;
            Some(TiltedDrift::new(model, measure.into_path())?)
        }
        None => None,
    };
    let sampler = tilt.as_ref().map_or(Sampler::Direct, Sampler::Tilted);
    let batch = batch_simulate(model, sampler, &sim, &x0, t.write_paths > 0)?;
    sink.write_with("summaries.jsonl", |w| {
        for s in &batch.summaries {
            writeln!(w, "{}", serde_json::to_string(s).map_err(|e| Error::Io(e.to_string()))?)?;
        }
        Ok(())
    })?;
    for (i, p) in batch.paths.iter().take(t.write_paths).enumerate() {
        if let Some(p) = p {
            sink.write_with(&format!("paths/path_{i:05}.csv"), |w| p.write_csv(w))?;
        }
    }
    let alive: Vec<_> = batch.summaries.iter().filter(|s| !s.exploded).collect();
    let n = model.dim();
    let m = alive.len().max(1) as f64;
    let mean_endpoint: Vec<f64> = (0..n).map(|i| alive.iter().map(|s| s.endpoint[i]).sum::<f64>() / m).collect();
    let second: Vec<f64> = (0..n)
        .map(|i| alive.iter().map(|s| s.endpoint[i] * s.endpoint[i]).sum::<f64>() / m)
        .collect();
    let mean_w = alive.iter().map(|s| s.w_value).sum::<f64>() / m;
    let var_w = alive.iter().map(|s| (s.w_value - mean_w).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let mean_weight = tilt
        .as_ref()
        .map(|_| alive.iter().map(|s| s.log_weight.unwrap_or(f64::NAN).exp()).sum::<f64>() / m);
    let summary = SimSummary {
        samples: t.samples,
        exploded: batch.exploded,
        mean_endpoint,
        endpoint_second_moment: second,
        mean_w,
        std_error_w: (var_w / m).sqrt(),
        mean_weight,
    };
    sink.note(format!("exploded = {} of {}", batch.exploded, t.samples));
    sink.json("summary.json", &summary)?;
    if batch.exploded == t.samples {
        return Err(RunError::Numerical("every trajectory exploded".into()));
    }
    Ok(())
}

fn run_action(cfg: &ExperimentConfig, model: &DiffusionModel, base: &Path, sink: &mut Sink) -> Result<(), RunError> {
    let t = cfg.action.as_ref().expect("validated");
    let mut rows = Vec::new();
    for p in &t.paths {
        let full = base.join(p);
        let file = fs::File::open(&full).map_err(|e| io_error(&full, e))?;
        let path = DiscretePath::read_csv(file).map_err(|e| io_error(&full, e))?;
        if path.dim() != model.dim() {
            return Err(invalid(format!("{} has dimension {}, model has {}", full.display(), path.dim(), model.dim())));
        }
        let report = ActionReport::new(action::fw_action(model, &path), action::gc_observable(model, &path, t.eps));
        rows.push((p.display().to_string(), report));
    }
    sink.write_with("action.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["file", "total", "per_unit_time", "stratonovich", "ito", "correction", "jump_term"])?;
        for (name, r) in &rows {
            c.write_record([
                name.clone(),
                format_float(r.total),
                format_float(r.per_unit_time),
                format_float(r.stratonovich),
                format_float(r.ito),
                format_float(r.correction),
                format_float(r.jump_term),
            ])?;
        }
        c.flush()?;
        Ok(())
    })
}

#[derive(Serialize)]
struct MinimizeSummary {
    q: Option<f64>,
    s: f64,
    lambda: Option<f64>,
    period: Option<f64>,
    residual: Option<f64>,
    converged: bool,
    infeasible: bool,
}

fn run_minimize(cfg: &ExperimentConfig, model: &DiffusionModel, sink: &mut Sink) -> Result<(), RunError> {
    let q = cfg.minimize.as_ref().and_then(|m| m.q);
    let (summary, measure) = match q {
        Some(q) => {
            let p = rate_point(model, q, &cfg.optimizer)?;
            (
                MinimizeSummary {
                    q: Some(q),
                    s: p.s,
                    lambda: Some(p.lambda),
                    period: p.measure.as_ref().map(|m| m.period()),
                    residual: Some(p.residual),
                    converged: p.converged,
                    infeasible: p.infeasible,
                },
                p.measure,
            )
        }
        None => {
            let r = minimize_rate(model, &cfg.optimizer)?;
            (
                MinimizeSummary {
                    q: None,
                    s: r.rate,
                    lambda: None,
                    period: Some(r.measure.period()),
                    residual: None,
                    converged: r.converged,
                    infeasible: false,
                },
                Some(r.measure),
            )
        }
    };
    if let Some(m) = &measure {
        sink.write_with("minimizer.csv", |w| m.path().as_path().write_csv(w))?;
    }
    sink.note(format!("s = {}", format_float(summary.s)));
    sink.json("result.json", &summary)?;
    if summary.infeasible {
        return Err(RunError::Numerical(format!("work {} is not reachable", q.unwrap_or(0.0))));
    }
    if !summary.converged {
        return Err(RunError::Numerical("optimizer did not converge".into()));
    }
    Ok(())
}

fn run_rate_curve(cfg: &ExperimentConfig, model: &DiffusionModel, sink: &mut Sink) -> Result<(), RunError> {
    let t = cfg.rate_curve.as_ref().expect("validated");
    let mut q = t.q.clone();
    q.sort_by(f64::total_cmp);
    q.dedup();
    let curve = rate_curve(model, &q, &cfg.optimizer)?;
    sink.write_with("rate_curve.csv", |w| curve.write_csv(w))?;
    let defect = ft_defect(&curve).ok();
    let mut dual_gap = None;
    if t.dual {
        let scan = dual_scan(model, &curve.q, &cfg.optimizer)?;
        sink.write_with("dual.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["q", "s", "s_dual", "lambda_star"])?;
            for i in 0..scan.q.len() {
                c.write_record([
                    format_float(scan.q[i]),
                    format_float(curve.s[i]),
                    format_float(scan.s[i]),
                    format_float(scan.argmax[i]),
                ])?;
            }
            c.flush()?;
            Ok(())
        })?;
        sink.write_with("scgf.csv", |w| {
            let mut c = csv::Writer::from_writer(w);
            c.write_record(["lambda", "scgf"])?;
            for (l, v) in scan.lambda.iter().zip(&scan.scgf) {
                c.write_record([format_float(*l), format_float(*v)])?;
            }
            c.flush()?;
            Ok(())
        })?;
        dual_gap = Some(
            curve
                .s
                .iter()
                .zip(&scan.s)
                .map(|(a, b)| if *a == 0.0 && *b == 0.0 { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) })
                .fold(0.0, f64::max),
        );
    }
    let summary = CurveSummary {
        ft_defect: defect,
        convexity_violations: curve.convexity_violations.iter().map(|&i| curve.q[i]).collect(),
        sanity_ok: curve.sanity_ok,
        all_converged: curve.converged.iter().all(|&c| c),
        dual_max_relative_gap: dual_gap,
    };
    sink.note(match defect {
        Some(d) => format!("ft_defect = {}", format_float(d)),
        None => "ft_defect = n/a (q grid is not symmetric)".into(),
    });
    sink.json("summary.json", &summary)?;
    if !summary.all_converged {
        let bad: Vec<String> = curve
            .q
            .iter()
            .zip(&curve.converged)
            .filter(|(_, c)| !**c)
            .map(|(q, _)| format_float(*q))
            .collect();
        return Err(RunError::Numerical(format!("no convergence at q = {}", bad.join(", "))));
    }
    Ok(())
}

fn write_mc(sink: &mut Sink, records: &[McRecord]) -> Result<(), RunError> {
    sink.write_with("mc.csv", |w| montecarlo::write_records_csv(records, w))?;
    sink.write_with("mc.jsonl", |w| montecarlo::write_records_jsonl(records, w))
}

fn run_mc(cfg: &ExperimentConfig, model: &DiffusionModel, sink: &mut Sink) -> Result<(), RunError> {
    let t = cfg.mc.as_ref().expect("validated");
    let mc = mc_config(t, cfg.seed);
    let records = if t.importance {
        let tilt = tilt_for(model, t.event.q, &cfg.optimizer, t.tilt)?;
        t.cells
            .iter()
            .enumerate()
            .map(|(i, &cell)| {
                let cfg_i = McConfig {
                    seed: crate::rng::derive_seed(cfg.seed, i as u64),
                    ..mc.clone()
                };
                estimate_importance(model, &tilt, cell, &cfg_i, &t.event)
            })
            .collect::<crate::Result<Vec<_>>>()?
    } else {
        estimate_direct(model, &t.cells, &mc, &t.event)?
    };
    write_mc(sink, &records)?;
    for r in &records {
        if !r.reliable {
            sink.note(format!("warning: eps={} T={} has effective sample size {:?}", r.eps, r.horizon, r.ess));
        }
    }
    if records.iter().any(|r| !r.valid) {
        return Err(RunError::Numerical("a cell had every trajectory explode".into()));
    }
    Ok(())
}

fn run_ft(cfg: &ExperimentConfig, model: &DiffusionModel, sink: &mut Sink) -> Result<(), RunError> {
    let t = cfg.ft_check.as_ref().expect("validated");
    let ft_cfg = ft_config(t, cfg.seed, &cfg.optimizer);
    let mut ratios = Vec::new();
    let mut failure = None;
    for &q in &t.q {
        match ft_ratio(model, t.eps, t.horizon, q, t.delta, &ft_cfg) {
            Ok(r) => ratios.push(r),
            Err(e) => {
                failure = Some(RunError::from(e));
                break;
            }
        }
    }
    sink.write_with("ft.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["q", "log_ratio", "predicted", "ratio", "flagged"])?;
        for r in &ratios {
            c.write_record([
                format_float(r.q),
                format_float(r.log_ratio),
                format_float(r.predicted),
                format_float(r.ratio()),
                r.flagged.to_string(),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    let records: Vec<McRecord> = ratios.iter().flat_map(|r| [r.plus.clone(), r.minus.clone()]).collect();
    write_mc(sink, &records)?;
    for r in &ratios {
        sink.note(format!("q = {}: ratio = {}", format_float(r.q), format_float(r.ratio())));
    }
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(r) = ratios.iter().find(|r| r.plus.hits == 0 || r.minus.hits == 0) {
        return Err(RunError::Numerical(format!("window around ±{} had no hits", r.q)));
    }
    Ok(())
}

/// `check-model` on the model block of any experiment file; the task
/// block is ignored.
pub fn check_model_file(config_path: &Path) -> Result<(String, Verdict), RunError> {
    let text = fs::read_to_string(config_path).map_err(|e| io_error(config_path, e))?;
    let cfg = ExperimentConfig::parse(&text)?;
    let model = DiffusionModel::from_spec(&cfg.model)?;
    let t = cfg.check_model.unwrap_or_default();
    let report = check_assumptions(&model, &t.radii, t.eps0);
    let text = serde_json::to_string_pretty(&report).map_err(|e| invalid(e.to_string()))?;
    Ok((text, report.verdict))
}

#[derive(Debug, Deserialize)]
struct CurveRow {
    q: f64,
    s: f64,
}

#[derive(Debug, Deserialize)]
struct McRow {
    eps: f64,
    #[serde(rename = "T")]
    horizon: f64,
    q: f64,
    rate: f64,
    rate_lo: f64,
    rate_hi: f64,
    kind: String,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, RunError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_error(path, e))).collect()
}

/// `s` at `q` by linear interpolation on the sorted curve.
fn interpolate(curve: &[(f64, f64)], q: f64) -> Option<f64> {
    let i = curve.iter().position(|&(x, _)| x >= q)?;
    let (x1, y1) = curve[i];
    if x1 == q {
        return Some(y1);
    }
    let (x0, y0) = *curve.get(i.checked_sub(1)?)?;
    Some(y0 + (y1 - y0) * (q - x0) / (x1 - x0))
}

/// Summary tables over one or more run directories, as CSV text: the rate
/// curve with its fluctuation-theorem defect, and Monte Carlo rates joined
/// with the curve.
pub fn report(dirs: &[PathBuf]) -> Result<String, RunError> {
    if dirs.is_empty() {
        return Err(invalid("no directories given"));
    }
    let mut curve: BTreeMap<u64, f64> = BTreeMap::new();
    let mut mc: Vec<McRow> = Vec::new();
    for dir in dirs {
        let manifest = dir.join(MANIFEST);
        if !manifest.is_file() {
            return Err(invalid(format!("{} has no {MANIFEST}", dir.display())));
        }
        let text = fs::read_to_string(&manifest).map_err(|e| io_error(&manifest, e))?;
        serde_json::from_str::<RunManifest>(&text).map_err(|e| io_error(&manifest, e))?;
        let c = dir.join("rate_curve.csv");
        if c.is_file() {
            for row in read_rows::<CurveRow>(&c)? {
                curve.insert(order_key(row.q), row.s);
            }
        }
        let m = dir.join("mc.csv");
        if m.is_file() {
            mc.extend(read_rows::<McRow>(&m)?);
        }
    }
    if curve.is_empty() && mc.is_empty() {
        return Err(invalid("no rate curve or Monte Carlo table found"));
    }
    let points: Vec<(f64, f64)> = curve.iter().map(|(k, s)| (from_key(*k), *s)).collect();
    let mut out = String::new();
    if !points.is_empty() {
        out.push_str("q,s,s(-q)-s(q)-q\n");
        for &(q, s) in &points {
            let defect = curve
                .get(&order_key(-q))
                .map_or(String::new(), |sm| format_float(sm - s - q));
            out.push_str(&format!("{},{},{}\n", format_float(q), format_float(s), defect));
        }
    }
    if !mc.is_empty() {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str("eps,T,q,kind,rate,rate_lo,rate_hi,s,rate/s\n");
        for r in &mc {
            let s = interpolate(&points, r.q);
            let (s_text, ratio) = match s {
                Some(s) => (format_float(s), if s > 0.0 { format_float(r.rate / s) } else { String::new() }),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                format_float(r.eps),
                format_float(r.horizon),
                format_float(r.q),
                r.kind,
                format_float(r.rate),
                format_float(r.rate_lo),
                format_float(r.rate_hi),
                s_text,
                ratio
            ));
        }
    }
    Ok(out)
}

/// Total-order key of a float, so `BTreeMap` keeps the curve sorted.
fn order_key(q: f64) -> u64 {
    let q = if q == 0.0 { 0.0 } else { q };
    let bits = q.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

fn from_key(k: u64) -> f64 {
    f64::from_bits(if k >> 63 == 1 { k & !(1 << 63) } else { !k })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CURVE: &str = r#"
task = "rate-curve"
seed = 3

[model]
family = "rotational-ou"
gamma = 1.0

[optimizer]
nodes = 32

[rate-curve]
q = [-0.5, 0.5]
"#;

    #[test]
    fn parses_and_rejects_unknown_keys() {
        let cfg = ExperimentConfig::parse(CURVE).unwrap();
        assert_eq!(cfg.task, TaskKind::RateCurve);
        assert_eq!(cfg.optimizer.nodes, 32);
        assert!(cfg.validate(Path::new(".")).is_ok());
        let typo = CURVE.replace("nodes = 32", "nodez = 32");
        assert!(matches!(ExperimentConfig::parse(&typo), Err(RunError::Validation(_))));
        let model_typo = CURVE.replace("gamma = 1.0", "gama = 1.0");
        assert!(ExperimentConfig::parse(&model_typo).is_err());
    }

    #[test]
    fn rejects_blocks_of_other_tasks_and_missing_files() {
        let extra = format!("{CURVE}\n[mc]\ncells = []\nsamples = 100\nevent = {{ q = 0.1 }}\n");
        let cfg = ExperimentConfig::parse(&extra).unwrap();
        assert!(matches!(cfg.validate(Path::new(".")), Err(RunError::Validation(_))));
        let action = "task = \"action\"\n[model]\nfamily = \"rotational-ou\"\n[action]\npaths = [\"missing.csv\"]\n";
        let cfg = ExperimentConfig::parse(action).unwrap();
        assert!(cfg.validate(Path::new("/nonexistent")).is_err());
    }

    #[test]
    fn order_keys_sort_floats() {
        let xs = [-2.0, -0.5, 0.0, 1e-9, 3.0];
        let keys: Vec<u64> = xs.iter().map(|&x| order_key(x)).collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        for &x in &xs {
            assert_eq!(from_key(order_key(x)), x);
        }
        assert_eq!(order_key(-0.0), order_key(0.0));
    }

    #[test]
    fn interpolation_on_curve() {
        let c = [(-1.0, 2.0), (0.0, 0.0), (1.0, 1.0)];
        assert_eq!(interpolate(&c, 0.5), Some(0.5));
        assert_eq!(interpolate(&c, 1.0), Some(1.0));
        assert_eq!(interpolate(&c, 2.0), None);
        assert_eq!(interpolate(&c, -2.0), None);
    }

    #[test]
    fn thread_override_beats_environment() {
        assert_eq!(resolve_threads(Some(3)).unwrap(), 3);
        assert!(resolve_threads(Some(0)).is_err());
    }
}
