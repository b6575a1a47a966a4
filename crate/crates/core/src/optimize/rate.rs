//! Minimization of the rate over loops and periods, with and without the
//! work constraint.

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cyclic::CyclicCholesky;
use super::inner::{self, InnerMethod};
use super::objective::{Cap, LoopObjective, Terms};
use crate::error::{Error, Result};
use crate::linalg::MAT;
use crate::model::DiffusionModel;
use crate::paths::{self, HolonomicMeasure, PeriodicPath};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySchedule {
    pub initial: f64,
    pub growth: f64,
    pub max: f64,
}

impl Default for PenaltySchedule {
    fn default() -> Self {
        PenaltySchedule {
            initial: 10.0,
            growth: 10.0,
            max: 1e10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LambdaGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid {
            min: -2.0,
            max: 1.0,
            count: 31,
        }
    }
}

impl LambdaGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.min];
        }
        (0..self.count)
            .map(|i| self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// Circle for planar rotational families, random loop otherwise.
    #[default]
    Auto,
    Circle,
    RandomLoop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub mode: InitMode,
    /// Loop center; the origin when absent.
    pub center: Option<Vec<f64>>,
    /// Radius of random loops.
    pub amplitude: f64,
    pub seed: u64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mode: InitMode::Auto,
            center: None,
            amplitude: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DualConfig {
    /// Radius of the soft confinement that keeps `ℐ - λW` bounded below.
    pub cap_radius: f64,
    pub cap_weight: f64,
    /// Log-spaced periods sampled before the golden refinement.
    pub period_samples: usize,
    /// Golden-section tolerance on `ln S`.
    pub period_tol: f64,
    /// Absolute tolerance on `λ` when maximizing `λq - Λ(λ)`.
    pub lambda_tol: f64,
}

impl Default for DualConfig {
    fn default() -> Self {
        DualConfig {
            cap_radius: 2.0,
            cap_weight: 100.0,
            period_samples: 24,
            period_tol: 1e-5,
            lambda_tol: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Free nodes `N` per loop.
    pub nodes: usize,
    /// Initial period `S₀`.
    pub period: f64,
    pub period_min: f64,
    pub period_max: f64,
    /// Log-spaced periods scanned before the golden-section search.
    pub period_samples: usize,
    /// Golden-section tolerance on `ln S`.
    pub period_tol: f64,
    /// Inner iterations per solve.
    pub max_iter: usize,
    /// Augmented-Lagrangian rounds per period.
    pub max_outer: usize,
    pub grad_tol: f64,
    pub penalty: PenaltySchedule,
    pub lambda_grid: LambdaGrid,
    pub dual: DualConfig,
    pub init: InitConfig,
    pub inner: InnerMethod,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            nodes: 256,
            period: 2.0 * PI,
            period_min: PI / 4.0,
            period_max: 16.0 * PI,
            period_samples: 16,
            period_tol: 1e-6,
            max_iter: 200,
            max_outer: 60,
            grad_tol: 1e-10,
            penalty: PenaltySchedule::default(),
            lambda_grid: LambdaGrid::default(),
            dual: DualConfig::default(),
            init: InitConfig::default(),
            inner: InnerMethod::Newton,
        }
    }
}

impl OptimizerConfig {
    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.nodes = nodes;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes < 16 {
            return Err(Error::invalid(format!("need at least 16 nodes, got {}", self.nodes)));
        }
        if !(0.0 < self.period_min && self.period_min <= self.period && self.period <= self.period_max)
            || !self.period_max.is_finite()
        {
            return Err(Error::invalid(format!(
                "period bracket must satisfy 0 < {} <= {} <= {}",
                self.period_min, self.period, self.period_max
            )));
        }
        let positive = [
            self.period_tol,
            self.grad_tol,
            self.penalty.initial,
            self.dual.cap_radius,
            self.dual.cap_weight,
            self.dual.lambda_tol,
            self.dual.period_tol,
            self.init.amplitude,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("tolerances, penalties and radii must be positive"));
        }
        if !(self.penalty.growth > 1.0) || !(self.penalty.max >= self.penalty.initial) {
            return Err(Error::invalid("penalty must grow by a factor > 1 up to its maximum"));
        }
        if self.period_samples < 3 || self.dual.period_samples < 3 {
            return Err(Error::invalid("need at least 3 period samples"));
        }
        if self.max_iter == 0 || self.max_outer == 0 {
            return Err(Error::invalid("iteration limits must be positive"));
        }
        if self.lambda_grid.count == 0 || !(self.lambda_grid.min <= self.lambda_grid.max) {
            return Err(Error::invalid("lambda grid must be nonempty and ordered"));
        }
        Ok(())
    }
}

/// Solution at one period.
#[derive(Clone, Debug)]
struct Solve {
    period: f64,
    z: Vec<f64>,
    terms: Terms,
    lambda: f64,
    /// Objective being minimized over the period; `∞` when infeasible.
    score: f64,
    /// Smallest Hessian eigenvalue at `z`, used to rank periods whose
    /// scores tie (0 when not computed).
    curvature: f64,
    converged: bool,
    infeasible: bool,
}

fn to_measure(model: &DiffusionModel, period: f64, z: &[f64]) -> HolonomicMeasure {
    HolonomicMeasure::new(PeriodicPath::from_loop(period, model.dim(), z).expect("optimizer keeps loops finite"))
}

/// Orders solves by score, treating values within `1e-6` relative as
/// ties broken by curvature.
fn rank(a: &Solve, b: &Solve) -> Ordering {
    let tie = 1e-6 * a.score.abs().max(b.score.abs()) + 1e-14;
    if a.score.is_finite() && b.score.is_finite() && (a.score - b.score).abs() <= tie {
        a.curvature.total_cmp(&b.curvature)
    } else {
        a.score.total_cmp(&b.score)
    }
}

fn better(a: &Solve, b: &Solve) -> bool {
    match rank(a, b) {
        Ordering::Less => true,
        Ordering::Equal => a.period < b.period,
        Ordering::Greater => false,
    }
}

/// Scans `ln S` on a grid, then golden-section refines around every local
/// minimum of the scan; discrete loops may wind several times per period,
/// so the profile in `S` is not unimodal. Exact ties go to the smallest
/// period.
fn period_search(
    cfg: &OptimizerConfig,
    samples: usize,
    tol: f64,
    seed: &Solve,
    solve: impl Fn(f64, &Solve) -> Solve + Sync,
) -> (Solve, usize) {
    let (lo, hi) = (cfg.period_min.ln(), cfg.period_max.ln());
    let grid: Vec<f64> = (0..samples)
        .map(|i| lo + (hi - lo) * i as f64 / (samples - 1) as f64)
        .collect();
    let scanned: Vec<Solve> = grid.par_iter().map(|&x| solve(x.exp(), seed)).collect();
    let mut evaluations = scanned.len();
    let mut best = scanned[0].clone();
    for s in &scanned[1..] {
        if better(s, &best) {
            best = s.clone();
        }
    }
    if seed.score.is_finite() && better(seed, &best) {
        best = seed.clone();
    }
    if !best.score.is_finite() {
        return (best, evaluations);
    }
    let minima: Vec<usize> = (0..samples)
        .filter(|&i| {
            scanned[i].score.is_finite()
                && (i == 0 || rank(&scanned[i], &scanned[i - 1]) == Ordering::Less)
                && (i + 1 == samples || rank(&scanned[i], &scanned[i + 1]) != Ordering::Greater)
        })
        .collect();
    let refined: Vec<(Solve, usize)> = minima
        .par_iter()
        .map(|&i| {
            let (a, b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(samples - 1)]);
            golden(a, b, tol, &scanned[i], &solve)
        })
        .collect();
    for (s, count) in refined {
        evaluations += count;
        if better(&s, &best) {
            best = s;
        }
    }
    (best, evaluations)
}

fn golden(mut a: f64, mut b: f64, tol: f64, start: &Solve, solve: &impl Fn(f64, &Solve) -> Solve) -> (Solve, usize) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut best = start.clone();
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = solve(x1.exp(), &best);
    let mut f2 = solve(x2.exp(), &best);
    let mut evaluations = 2;
    for s in [&f1, &f2] {
        if rank(s, &best) == Ordering::Less {
            best = s.clone();
        }
    }
    while b - a > tol {
        if rank(&f1, &f2) != Ordering::Greater {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = solve(x1.exp(), &best);
            if rank(&f1, &best) == Ordering::Less {
                best = f1.clone();
            }
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = solve(x2.exp(), &best);
            if rank(&f2, &best) == Ordering::Less {
                best = f2.clone();
            }
        }
        evaluations += 1;
    }
    (best, evaluations)
}

/// Starting loop for a target work `q` (ignored by random loops when 0).
fn initial_loop(model: &DiffusionModel, q: f64, cfg: &OptimizerConfig) -> Result<Vec<f64>> {
    let n = model.dim();
    let nodes = cfg.nodes;
    let center = match &cfg.init.center {
        Some(c) if c.len() == n => c.clone(),
        Some(_) => return Err(Error::invalid("initial center must match the model dimension")),
        None => vec![0.0; n],
    };
    let circle = match cfg.init.mode {
        InitMode::Circle => true,
        InitMode::RandomLoop => false,
        InitMode::Auto => model.spec().and_then(|s| s.rotation()).is_some(),
    };
    if circle {
        if n != 2 {
            return Err(Error::invalid("circle initialization needs a planar model"));
        }
        let gamma = model.spec().and_then(|s| s.rotation()).unwrap_or(1.0);
        let radius = if gamma.abs() > 0.0 { (q.abs() / gamma.abs()).sqrt() } else { q.abs().sqrt() };
        let orientation = if q * gamma < 0.0 { -1.0 } else { 1.0 };
        return Ok((0..nodes)
            .flat_map(|k| {
                let t = 2.0 * PI * k as f64 / nodes as f64;
                [center[0] + radius * t.cos(), center[1] + orientation * radius * t.sin()]
            })
            .collect());
    }
    let mut rng = rng::stream(rng::derive_seed(cfg.init.seed, 0x6c6f6f70), 0);
    let raw: Vec<f64> = (0..nodes * n).map(|_| rng.sample(StandardNormal)).collect();
    let rough = PeriodicPath::from_loop(cfg.period, n, &raw)?;
    let (smooth, _) = paths::mollify_periodic(&rough, cfg.period / 5.0)?;
    let mut z = smooth.loop_nodes().to_vec();
    let mean: Vec<f64> = (0..n).map(|i| z.iter().skip(i).step_by(n).sum::<f64>() / nodes as f64).collect();
    let spread = z
        .chunks(n)
        .map(|x| (0..n).map(|i| (x[i] - mean[i]).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        .max(1e-300);
    let mut scale = cfg.init.amplitude / spread;
    for x in z.chunks_mut(n) {
        for i in 0..n {
            x[i] = center[i] + scale * (x[i] - mean[i]);
        }
    }
    if q != 0.0 {
        let w = LoopObjective::new(model, nodes, cfg.period).terms(&z).work;
        if w * q < 0.0 {
            // Reversal flips the sign of the work.
            let reversed = paths::time_reverse(&PeriodicPath::from_loop(cfg.period, n, &z)?);
            z = reversed.loop_nodes().to_vec();
        }
        if w != 0.0 {
            scale = (q.abs() / w.abs()).sqrt().clamp(0.1, 10.0);
            for x in z.chunks_mut(n) {
                for i in 0..n {
                    x[i] = center[i] + scale * (x[i] - center[i]);
                }
            }
        }
    }
    Ok(z)
}

/// Result of [`minimize_rate`].
#[derive(Clone, Debug)]
pub struct MinimizeResult {
    pub measure: HolonomicMeasure,
    pub rate: f64,
    pub converged: bool,
    /// Objective after each accepted inner step of the initial solve at `S₀`.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

/// Local minimizer of `ℐ` over loops and periods.
pub fn minimize_rate(model: &DiffusionModel, cfg: &OptimizerConfig) -> Result<MinimizeResult> {
    cfg.validate()?;
    let z0 = initial_loop(model, 0.0, cfg)?;
    minimize_rate_from(model, cfg, z0)
}

/// [`minimize_rate`] from an explicit initial loop of `cfg.nodes` nodes.
pub fn minimize_rate_from(model: &DiffusionModel, cfg: &OptimizerConfig, z0: Vec<f64>) -> Result<MinimizeResult> {
    cfg.validate()?;
    if z0.len() != cfg.nodes * model.dim() || z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial loop must hold N finite nodes"));
    }
    let solve = |period: f64, warm: &[f64], trace: Option<&mut Vec<f64>>| {
        let obj = LoopObjective::new(model, cfg.nodes, period);
        let mut z = warm.to_vec();
        let out = inner::minimize(&obj, &mut z, cfg.inner, cfg.grad_tol, cfg.max_iter, trace);
        Solve {
            period,
            z,
            terms: out.terms,
            lambda: 0.0,
            score: if out.terms.rate.is_finite() { out.terms.rate } else { f64::INFINITY },
            curvature: 0.0,
            converged: out.converged,
            infeasible: false,
        }
    };
    let mut trace = Vec::new();
    let first = solve(cfg.period, &z0, Some(&mut trace));
    let (best, evaluations) = period_search(cfg, cfg.period_samples, cfg.period_tol, &first, |s, warm| solve(s, &warm.z, None));
    Ok(MinimizeResult {
        measure: to_measure(model, best.period, &best.z),
        rate: best.terms.rate,
        converged: best.converged,
        trace,
        evaluations: evaluations + 1,
    })
}

/// One point `(q, s(q))` of the constrained problem.
#[derive(Clone, Debug)]
pub struct RatePoint {
    pub q: f64,
    /// `+∞` when the constraint could not be met.
    pub s: f64,
    /// Multiplier of the work constraint, an estimate of `s'(q)`.
    pub lambda: f64,
    pub measure: Option<HolonomicMeasure>,
    pub residual: f64,
    pub converged: bool,
    pub infeasible: bool,
    pub evaluations: usize,
}

/// Tolerance on `|W - q|` for a converged point.
pub fn constraint_tolerance(q: f64) -> f64 {
    1e-6 * q.abs().max(1.0)
}

fn constrained_solve(model: &DiffusionModel, q: f64, cfg: &OptimizerConfig, period: f64, warm: &Solve) -> Solve {
    let mut obj = LoopObjective::new(model, cfg.nodes, period);
    obj.q = q;
    obj.lambda = warm.lambda;
    obj.mu = cfg.penalty.initial;
    let mut z = warm.z.clone();
    let tol = constraint_tolerance(q);
    let target = 1e-2 * tol;
    let mut prev = f64::INFINITY;
    let mut last = None;
    for _ in 0..cfg.max_outer {
        let out = inner::minimize(&obj, &mut z, cfg.inner, cfg.grad_tol, cfg.max_iter, None);
        let c = out.terms.work - q;
        let done = c.abs() <= target && out.converged;
        let stuck = out.work_grad_norm <= 1e-12 && c.abs() > tol;
        last = Some((out, c));
        if done || stuck || !c.is_finite() {
            break;
        }
        obj.lambda -= obj.mu * c;
        if c.abs() > 0.25 * prev {
            obj.mu *= cfg.penalty.growth;
            if obj.mu > cfg.penalty.max {
                break;
            }
        }
        prev = c.abs();
    }
    let (out, c) = last.expect("at least one round");
    let infeasible = !(c.abs() <= tol);
    Solve {
        period,
        z,
        terms: out.terms,
        lambda: obj.lambda,
        score: if infeasible { f64::INFINITY } else { out.terms.rate },
        curvature: 0.0,
        converged: out.converged && !infeasible,
        infeasible,
    }
}

/// `s(q)`: minimal rate over loops and periods with per-unit-time work `q`.
pub fn rate_point(model: &DiffusionModel, q: f64, cfg: &OptimizerConfig) -> Result<RatePoint> {
    cfg.validate()?;
    if !q.is_finite() {
        return Err(Error::invalid("target work must be finite"));
    }
    let z0 = initial_loop(model, q, cfg)?;
    rate_point_from(model, q, cfg, z0, cfg.period, 0.0)
}

/// [`rate_point`] warm-started from a loop, period and multiplier.
pub fn rate_point_from(
    model: &DiffusionModel,
    q: f64,
    cfg: &OptimizerConfig,
    z0: Vec<f64>,
    period: f64,
    lambda: f64,
) -> Result<RatePoint> {
    cfg.validate()?;
    if z0.len() != cfg.nodes * model.dim() || z0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial loop must hold N finite nodes"));
    }
    let seed = Solve {
        period,
        z: z0,
        terms: Terms {
            rate: 0.0,
            work: 0.0,
            cap: 0.0,
            value: 0.0,
        },
        lambda,
        score: f64::INFINITY,
        curvature: 0.0,
        converged: false,
        infeasible: true,
    };
    let first = constrained_solve(model, q, cfg, period.clamp(cfg.period_min, cfg.period_max), &seed);
    let start = if first.infeasible { &seed } else { &first };
    let (best, evaluations) = period_search(cfg, cfg.period_samples, cfg.period_tol, start, |s, warm| {
        constrained_solve(model, q, cfg, s, warm)
    });
    let best = if best.infeasible && !first.infeasible { first } else { best };
    if best.infeasible {
        return Ok(RatePoint {
            q,
            s: f64::INFINITY,
            lambda: f64::NAN,
            measure: None,
            residual: best.terms.work - q,
            converged: false,
            infeasible: true,
            evaluations: evaluations + 1,
        });
    }
    Ok(RatePoint {
        q,
        s: best.terms.rate,
        lambda: best.lambda,
        measure: Some(to_measure(model, best.period, &best.z)),
        residual: best.terms.work - q,
        converged: best.converged,
        infeasible: false,
        evaluations: evaluations + 1,
    })
}

/// Sampled `q ↦ s(q)` with multipliers, minimizers and diagnostics.
#[derive(Clone, Debug)]
pub struct RateCurve {
    pub q: Vec<f64>,
    pub s: Vec<f64>,
    pub lambda: Vec<f64>,
    pub converged: Vec<bool>,
    pub minimizers: Vec<Option<HolonomicMeasure>>,
    /// Interior indices where the midpoint convexity test fails by more
    /// than `1e-6`.
    pub convexity_violations: Vec<usize>,
    /// `s(0) ≤ s(q) + s(-q)` on every symmetric pair, when `0` is sampled.
    pub sanity_ok: bool,
}

impl RateCurve {
    pub fn new(q: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if q.len() != s.len() {
            return Err(Error::invalid("q and s must have the same length"));
        }
        let m = q.len();
        let mut curve = RateCurve {
            q,
            s,
            lambda: vec![f64::NAN; m],
            converged: vec![true; m],
            minimizers: vec![None; m],
            convexity_violations: Vec::new(),
            sanity_ok: true,
        };
        curve.diagnose();
        Ok(curve)
    }

    fn diagnose(&mut self) {
        self.convexity_violations = convexity_violations(&self.q, &self.s, 1e-6);
        self.sanity_ok = match self.q.iter().position(|&q| q == 0.0) {
            None => true,
            Some(zero) => self.q.iter().enumerate().all(|(i, &q)| {
                match self.q.iter().position(|&p| p == -q) {
                    Some(j) => self.s[zero] <= self.s[i] + self.s[j] + 1e-9,
                    None => true,
                }
            }),
        };
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["q", "s", "lambda", "converged"])?;
        for i in 0..self.q.len() {
            w.write_record([
                paths::format_float(self.q[i]),
                paths::format_float(self.s[i]),
                paths::format_float(self.lambda[i]),
                self.converged[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Interior indices `i` with `s_i` above the chord of its neighbours by
/// more than `tol`.
pub fn convexity_violations(q: &[f64], s: &[f64], tol: f64) -> Vec<usize> {
    (1..q.len().saturating_sub(1))
        .filter(|&i| {
            let (a, b) = (q[i] - q[i - 1], q[i + 1] - q[i]);
            let chord = (s[i - 1] * b + s[i + 1] * a) / (a + b);
            s[i].is_finite() && chord.is_finite() && s[i] > chord + tol
        })
        .collect()
}

/// `rate_point` on every `q` in parallel, then a sweep away from `q = 0`
/// that warm-starts each point from its inner neighbour and keeps the
/// lower value.
pub fn rate_curve(model: &DiffusionModel, qs: &[f64], cfg: &OptimizerConfig) -> Result<RateCurve> {
    cfg.validate()?;
    if qs.is_empty() || qs.windows(2).any(|w| !(w[0] < w[1])) || qs.iter().any(|q| !q.is_finite()) {
        return Err(Error::invalid("q grid must be finite and strictly increasing"));
    }
    let mut points: Vec<RatePoint> = qs
        .par_iter()
        .map(|&q| rate_point(model, q, cfg))
        .collect::<Result<_>>()?;
    let pivot = qs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut order: Vec<(usize, usize)> = (pivot + 1..qs.len()).map(|i| (i, i - 1)).collect();
    order.extend((0..pivot).rev().map(|i| (i, i + 1)));
    for (i, j) in order {
        let (q, neighbour) = (qs[i], &points[j]);
        let Some(hm) = &neighbour.measure else { continue };
        if neighbour.q * q <= 0.0 || !neighbour.s.is_finite() {
            continue;
        }
        let scale = (q / neighbour.q).sqrt();
        let z: Vec<f64> = hm.path().loop_nodes().iter().map(|v| v * scale).collect();
        let warm = rate_point_from(model, q, cfg, z, hm.period(), neighbour.lambda)?;
        if warm.converged && (warm.s < points[i].s || !points[i].converged) {
            points[i] = warm;
        }
    }
    let mut curve = RateCurve {
        q: qs.to_vec(),
        s: points.iter().map(|p| p.s).collect(),
        lambda: points.iter().map(|p| p.lambda).collect(),
        converged: points.iter().map(|p| p.converged).collect(),
        minimizers: points.into_iter().map(|p| p.measure).collect(),
        convexity_violations: Vec::new(),
        sanity_ok: true,
    };
    curve.diagnose();
    Ok(curve)
}

/// Minimizer of the tilted, capped objective at one `λ`.
#[derive(Clone, Debug)]
pub struct DualPoint {
    pub lambda: f64,
    /// `Λ(λ) = -min_{S,z} [ℐ - λW + cap]`.
    pub scgf: f64,
    /// `W` at the minimizer, the slope of `Λ`.
    pub work: f64,
    pub converged: bool,
    pub measure: HolonomicMeasure,
}

/// Solves `min_{S,z} ℐ - λW + cap`. Periods whose minima tie (typically the
/// collapsed loop) are ranked by the smallest Hessian eigenvalue, which
/// steers the period search toward the window where a loop first pays off.
pub fn dual_value(model: &DiffusionModel, lambda: f64, cfg: &OptimizerConfig) -> Result<DualPoint> {
    cfg.validate()?;
    let n = model.dim();
    let center = cfg.init.center.clone().unwrap_or_else(|| vec![0.0; n]);
    if center.len() != n {
        return Err(Error::invalid("initial center must match the model dimension"));
    }
    let cap = Cap {
        center: center.clone(),
        radius: cfg.dual.cap_radius,
        weight: cfg.dual.cap_weight,
    };
    let nodes = cfg.nodes;
    let radius = 0.5 * cfg.dual.cap_radius;
    let z0: Vec<f64> = if n == 2 {
        let orientation = if lambda < 0.0 { -1.0 } else { 1.0 };
        (0..nodes)
            .flat_map(|k| {
                let t = 2.0 * PI * k as f64 / nodes as f64;
                [center[0] + radius * t.cos(), center[1] + orientation * radius * t.sin()]
            })
            .collect()
    } else {
        let mut z = initial_loop(model, 0.0, cfg)?;
        if lambda != 0.0 {
            let w = LoopObjective::new(model, nodes, cfg.period).terms(&z).work;
            if w * lambda < 0.0 {
                z = paths::time_reverse(&PeriodicPath::from_loop(cfg.period, n, &z)?)
                    .loop_nodes()
                    .to_vec();
            }
        }
        z
    };
    let solve = |period: f64, warm: &[f64]| {
        let mut obj = LoopObjective::new(model, nodes, period);
        obj.lambda = lambda;
        obj.cap = Some(cap.clone());
        let mut z = warm.to_vec();
        let out = inner::minimize(&obj, &mut z, cfg.inner, cfg.grad_tol, cfg.max_iter, None);
        let mut diag = vec![[0.0; MAT]; nodes];
        let mut sub = vec![[0.0; MAT]; nodes];
        obj.hessian_blocks(&z, out.terms.work, &mut diag, &mut sub);
        let scale = diag.iter().map(|b| (0..n).map(|i| b[i * n + i].abs()).fold(0.0, f64::max)).fold(0.0, f64::max);
        let curvature = CyclicCholesky::min_eigenvalue(n, &diag, &sub, 1e-9 * scale.max(1e-12));
        Solve {
            period,
            z,
            terms: out.terms,
            lambda,
            score: if out.terms.value.is_finite() { out.terms.value } else { f64::INFINITY },
            curvature,
            converged: out.converged,
            infeasible: false,
        }
    };
    let seed = solve(cfg.period, &z0);
    // The scan starts cold; refinements continue from a nontrivial loop, as
    // a collapsed one is a critical point the solver cannot leave.
    let (best, _) = period_search(cfg, cfg.dual.period_samples, cfg.dual.period_tol, &seed, |s, warm| {
        if warm.period != cfg.period && warm.terms.work.abs() > 1e-9 {
            solve(s, &warm.z)
        } else {
            solve(s, &z0)
        }
    });
    Ok(DualPoint {
        lambda,
        scgf: -best.score,
        work: best.terms.work,
        converged: best.converged,
        measure: to_measure(model, best.period, &best.z),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle(q: f64) -> f64 {
        let root = 2f64.sqrt();
        if q >= 0.0 {
            q * (root - 1.0) / 2.0
        } else {
            -q * (root + 1.0) / 2.0
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        assert!(OptimizerConfig::default().with_nodes(8).validate().is_err());
        let bad = OptimizerConfig {
            period_min: 10.0,
            ..OptimizerConfig::default()
        };
        assert!(bad.validate().is_err());
        let toml_cfg: OptimizerConfig = toml::from_str("nodes = 64\ninner = \"gradient-descent\"").unwrap();
        assert_eq!(toml_cfg.nodes, 64);
        assert!(toml::from_str::<OptimizerConfig>("nodse = 64").is_err());
    }

    #[test]
    fn rotational_ou_points_match_circular_orbit() {
        let model = DiffusionModel::rotational_ou(1.0);
        let cfg = OptimizerConfig::default().with_nodes(64);
        for q in [1.0, -1.0, 0.3] {
            let p = rate_point(&model, q, &cfg).unwrap();
            assert!(p.converged, "{p:?}");
            assert!((p.s - oracle(q)).abs() <= 1e-3 * oracle(q), "q={q}: {} vs {}", p.s, oracle(q));
            assert!(p.residual.abs() <= constraint_tolerance(q));
            let slope = if q > 0.0 { (2f64.sqrt() - 1.0) / 2.0 } else { -(2f64.sqrt() + 1.0) / 2.0 };
            assert!((p.lambda - slope).abs() < 1e-3, "λ={} vs {slope}", p.lambda);
        }
        let zero = rate_point(&model, 0.0, &cfg).unwrap();
        assert_eq!(zero.s, 0.0);
    }

    #[test]
    fn gradient_system_is_infeasible_for_nonzero_work() {
        let model = DiffusionModel::double_well(0.0);
        let cfg = OptimizerConfig::default().with_nodes(32);
        let p = rate_point(&model, 0.5, &cfg).unwrap();
        assert!(p.infeasible && p.s.is_infinite());
    }

    #[test]
    fn minimizers_are_fixed_points() {
        let rot = DiffusionModel::rotational_ou(1.0);
        let cfg = OptimizerConfig {
            init: InitConfig {
                mode: InitMode::RandomLoop,
                ..InitConfig::default()
            },
            ..OptimizerConfig::default().with_nodes(32)
        };
        let r = minimize_rate(&rot, &cfg).unwrap();
        assert!(r.rate <= 1e-8 && r.converged);
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        let dw = DiffusionModel::double_well(0.0);
        let cfg = OptimizerConfig {
            init: InitConfig {
                center: Some(vec![0.9]),
                amplitude: 0.05,
                ..cfg.init.clone()
            },
            ..cfg
        };
        let r = minimize_rate(&dw, &cfg).unwrap();
        assert!(r.rate <= 1e-8);
        assert!(r.measure.path().loop_nodes().iter().all(|x| (x - 1.0).abs() < 1e-4));
    }

    #[test]
    fn curve_is_convex_and_warm_started() {
        let model = DiffusionModel::rotational_ou(1.0);
        let cfg = OptimizerConfig::default().with_nodes(32);
        let qs = [-0.5, -0.25, 0.0, 0.25, 0.5];
        let curve = rate_curve(&model, &qs, &cfg).unwrap();
        assert!(curve.convexity_violations.is_empty());
        assert!(curve.sanity_ok);
        for (q, s) in qs.iter().zip(&curve.s) {
            assert!((s - oracle(*q)).abs() <= 1e-3 * oracle(*q).max(1e-12), "{q}: {s}");
        }
        assert!(rate_curve(&model, &[0.5, 0.0], &cfg).is_err());
    }
}
