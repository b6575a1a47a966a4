//! Empirical large-deviation rates of the work functional and of additive
//! functionals: direct and Girsanov-weighted window probabilities, the
//! fluctuation-theorem ratio and occupation statistics.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::action;
use crate::error::{Error, Result};
use crate::linalg::MAT;
use crate::model::DiffusionModel;
use crate::optimize::{rate_point, OptimizerConfig};
use crate::paths::{format_float, DiscretePath, TimeGrid};
use crate::rng;
use crate::simulate::{self, batch_map, NoiseMode, SimConfig, TiltedDrift, WorkTilt, DEFAULT_MAX_RADIUS};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Smallest effective sample size of a trustworthy weighted estimate.
pub const MIN_ESS: f64 = 10.0;

/// State-space function integrated along paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GridFunction {
    One,
    SquaredNorm,
    Coordinate { axis: usize },
    /// `1{x_axis ≥ threshold}`.
    Indicator {
        axis: usize,
        #[serde(default)]
        threshold: f64,
    },
}

impl GridFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            GridFunction::One => 1.0,
            GridFunction::SquaredNorm => x.iter().map(|v| v * v).sum(),
            GridFunction::Coordinate { axis } => x[axis],
            GridFunction::Indicator { axis, threshold } => (x[axis] >= threshold) as u8 as f64,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            GridFunction::Coordinate { axis } | GridFunction::Indicator { axis, .. } if axis >= dim => {
                Err(Error::invalid(format!("axis {axis} out of range for dimension {dim}")))
            }
            _ => Ok(()),
        }
    }
}

/// Which time average an event constrains.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Observable {
    /// Stratonovich work `W_[0,T]`.
    #[default]
    Work,
    /// `A_T / T = T⁻¹ ∫ f(X_t) dt`.
    Additive(GridFunction),
}

/// The closed window `[q - δ, q + δ]` for an observable. `δ = ∞` is the
/// whole line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub q: f64,
    /// Half-width; defaults to `0.05 max(1, |q|)`.
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub observable: Observable,
}

impl EventSpec {
    pub fn work(q: f64) -> Self {
        EventSpec {
            q,
            delta: None,
            observable: Observable::Work,
        }
    }

    pub fn everything() -> Self {
        EventSpec::work(0.0).with_delta(f64::INFINITY)
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = Some(delta);
        self
    }

    pub fn with_observable(mut self, observable: Observable) -> Self {
        self.observable = observable;
        self
    }

    pub fn half_width(&self) -> f64 {
        self.delta.unwrap_or(0.05 * self.q.abs().max(1.0))
    }

    pub fn contains(&self, value: f64) -> bool {
        let d = self.half_width();
        d == f64::INFINITY && !value.is_nan() || (value - self.q).abs() <= d
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !self.q.is_finite() {
            return Err(Error::invalid("window center must be finite"));
        }
        if !(self.half_width() > 0.0) {
            return Err(Error::invalid(format!("window half-width must be positive, got {}", self.half_width())));
        }
        if let Observable::Additive(f) = &self.observable {
            f.validate(dim)?;
        }
        Ok(())
    }

    fn value(&self, model: &DiffusionModel, path: &DiscretePath) -> f64 {
        match &self.observable {
            Observable::Work => action::stratonovich_work(model, path),
            Observable::Additive(f) => time_average(path, f, 0),
        }
    }
}

/// One `(ε, T)` cell of a Monte Carlo grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McCell {
    pub eps: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub dt: f64,
    /// Paths per cell, `M`.
    pub samples: usize,
    pub seed: u64,
    /// Initial point; the origin when absent.
    pub x0: Option<Vec<f64>>,
    pub max_radius: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            dt: 0.01,
            samples: 10_000,
            seed: 0,
            x0: None,
            max_radius: DEFAULT_MAX_RADIUS,
        }
    }
}

impl McConfig {
    pub fn validate(&self, model: &DiffusionModel) -> Result<()> {
        if self.samples < 100 {
            return Err(Error::invalid(format!("at least 100 samples are needed, got {}", self.samples)));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::invalid("time step must be positive"));
        }
        if !(self.max_radius > 0.0) {
            return Err(Error::invalid("explosion radius must be positive"));
        }
        if self.x0.as_ref().is_some_and(|x| x.len() != model.dim()) {
            return Err(Error::invalid("initial point must match the model dimension"));
        }
        Ok(())
    }

    fn start(&self, model: &DiffusionModel) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| vec![0.0; model.dim()])
    }

    fn sim(&self, cell: McCell, seed: u64) -> Result<SimConfig> {
        let grid = TimeGrid::with_step(cell.horizon, self.dt)?;
        let mut cfg = SimConfig::new(cell.eps, grid, seed)?.with_batch(self.samples);
        cfg.max_radius = self.max_radius;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Direct,
    Importance,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Direct => "direct",
            EstimatorKind::Importance => "importance",
        }
    }
}

/// Window probability and rate estimate for one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McRecord {
    pub eps: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub q: f64,
    pub delta: f64,
    #[serde(rename = "M")]
    pub samples: usize,
    pub hits: usize,
    pub phat: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// `log p̂`, finite even when `p̂` underflows.
    pub log_phat: f64,
    /// `-(ε/T) log p̂`; infinite without hits, when `rate_lo` carries the
    /// rule-of-three bound.
    pub rate: f64,
    pub rate_lo: f64,
    pub rate_hi: f64,
    pub kind: EstimatorKind,
    pub exploded: usize,
    /// Effective sample size of the weighted hits.
    pub ess: Option<f64>,
    /// False when every path exploded.
    pub valid: bool,
    /// False for weighted estimates with `ess < 10`.
    pub reliable: bool,
}

/// Wilson score interval for `hits` out of `m`.
pub fn wilson_interval(hits: usize, m: usize) -> (f64, f64) {
    let (h, m) = (hits as f64, m as f64);
    let z2 = Z95 * Z95;
    let center = (h + 0.5 * z2) / (m + z2);
    let half = Z95 / (m + z2) * (h * (m - h) / m + 0.25 * z2).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn to_rate(scale: f64, log_p: f64) -> f64 {
    let r = -scale * log_p;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

struct Draw {
    value: f64,
    log_weight: f64,
    exploded: bool,
}

/// Importance sampler: the orbit-following drift or the work tilt.
#[derive(Clone, Debug)]
pub enum Tilt {
    Orbit(TiltedDrift),
    Work { lambda: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TiltKind {
    Orbit,
    #[default]
    Work,
}

fn draw(
    model: &DiffusionModel,
    tilt: Option<&Tilt>,
    sim: &SimConfig,
    x0: &[f64],
    event: &EventSpec,
) -> Result<Vec<Draw>> {
    batch_map(sim.batch, |i| {
        let stream = i as u64;
        let out = match tilt {
            None => simulate::integrate(model, sim, x0, stream, NoiseMode::Gaussian).map(|p| (p, 0.0)),
            Some(Tilt::Orbit(t)) => {
                let dynamics = t.dynamics(model, sim.eps);
                simulate::integrate(&dynamics, sim, x0, stream, NoiseMode::Gaussian)
                    .and_then(|p| Ok((simulate::log_likelihood_ratio(model, &dynamics, sim.eps, &p)?, p)))
                    .map(|(w, p)| (p, w))
            }
            Some(&Tilt::Work { lambda }) => {
                let dynamics = WorkTilt { model, lambda };
                simulate::integrate(&dynamics, sim, x0, stream, NoiseMode::Gaussian)
                    .and_then(|p| Ok((simulate::log_likelihood_ratio(model, &dynamics, sim.eps, &p)?, p)))
                    .map(|(w, p)| (p, w))
            }
        };
        match out {
            Ok((path, log_weight)) => Ok(Draw {
                value: event.value(model, &path),
                log_weight,
                exploded: false,
            }),
            Err(Error::Explosion { .. }) => Ok(Draw {
                value: f64::NAN,
                log_weight: f64::NEG_INFINITY,
                exploded: true,
            }),
            Err(e) => Err(e),
        }
    })
    .into_iter()
    .collect()
}

fn record(cell: McCell, event: &EventSpec, draws: &[Draw], kind: EstimatorKind) -> McRecord {
    let m = draws.len();
    let scale = cell.eps / cell.horizon;
    let exploded = draws.iter().filter(|d| d.exploded).count();
    let hit: Vec<&Draw> = draws.iter().filter(|d| !d.exploded && event.contains(d.value)).collect();
    let hits = hit.len();
    let mut rec = McRecord {
        eps: cell.eps,
        horizon: cell.horizon,
        q: event.q,
        delta: event.half_width(),
        samples: m,
        hits,
        phat: 0.0,
        ci_lo: 0.0,
        ci_hi: 1.0,
        log_phat: f64::NEG_INFINITY,
        rate: f64::INFINITY,
        rate_lo: 0.0,
        rate_hi: f64::INFINITY,
        kind,
        exploded,
        ess: None,
        valid: exploded < m,
        reliable: true,
    };
    match kind {
        EstimatorKind::Direct => {
            let (lo, hi) = wilson_interval(hits, m);
            rec.phat = hits as f64 / m as f64;
            rec.log_phat = rec.phat.ln();
            if hits == 0 {
                // Rule of three: p < 3/M at 95%.
                rec.ci_hi = 3.0 / m as f64;
            } else {
                rec.ci_hi = hi;
                rec.rate = to_rate(scale, rec.log_phat);
            }
            rec.ci_lo = lo;
        }
        EstimatorKind::Importance => {
            let logs = hit.iter().map(|d| d.log_weight);
            let top = logs.clone().fold(f64::NEG_INFINITY, f64::max);
            if hits == 0 || top == f64::NEG_INFINITY {
                rec.ess = Some(0.0);
                rec.reliable = false;
                rec.rate_lo = to_rate(scale, rec.ci_hi.ln());
                return rec;
            }
            let scaled: Vec<f64> = logs.clone().map(|l| (l - top).exp()).collect();
            let sum: f64 = scaled.iter().sum();
            let sum2: f64 = scaled.iter().map(|y| y * y).sum();
            let mean = sum / m as f64;
            let var = ((sum2 - m as f64 * mean * mean) / (m as f64 - 1.0)).max(0.0);
            let se = (var / m as f64).sqrt();
            rec.log_phat = log_sum_exp(logs) - (m as f64).ln();
            rec.phat = rec.log_phat.exp();
            let lo = mean - Z95 * se;
            let log_lo = if lo > 0.0 { top + lo.ln() } else { f64::NEG_INFINITY };
            let log_hi = (top + (mean + Z95 * se).ln()).min(0.0);
            rec.ci_lo = log_lo.exp();
            rec.ci_hi = log_hi.exp();
            rec.rate = to_rate(scale, rec.log_phat);
            rec.rate_lo = to_rate(scale, log_hi);
            rec.rate_hi = to_rate(scale, log_lo);
            let ess = sum * sum / sum2;
            rec.ess = Some(ess);
            rec.reliable = ess >= MIN_ESS;
            return rec;
        }
    }
    rec.rate_lo = to_rate(scale, rec.ci_hi.ln());
    rec.rate_hi = if rec.ci_lo > 0.0 { to_rate(scale, rec.ci_lo.ln()) } else { f64::INFINITY };
    rec
}

fn check_cell(cell: McCell) -> Result<()> {
    if !(cell.eps > 0.0) || !(cell.horizon > 0.0) || !cell.horizon.is_finite() {
        return Err(Error::invalid(format!("cell needs ε > 0 and finite T > 0, got {cell:?}")));
    }
    Ok(())
}

/// Direct estimates of `P(observable ∈ window)` for each cell; cell `i` uses
/// its own stream family so cells are independent and reorderable.
pub fn estimate_direct(
    model: &DiffusionModel,
    cells: &[McCell],
    cfg: &McConfig,
    event: &EventSpec,
) -> Result<Vec<McRecord>> {
    cfg.validate(model)?;
    event.validate(model.dim())?;
    let x0 = cfg.start(model);
    cells
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            check_cell(cell)?;
            let sim = cfg.sim(cell, rng::derive_seed(cfg.seed, i as u64))?;
            let draws = draw(model, None, &sim, &x0, event)?;
            Ok(record(cell, event, &draws, EstimatorKind::Direct))
        })
        .collect()
}

/// Weighted estimate under the tilted dynamics, `p̂ = M⁻¹ Σ w_i 1{hit}` with
/// `w = dP/dQ` from the Girsanov log-weight. The weights are the exact
/// likelihood ratio of the two discretized chains only for constant
/// diffusion matrices, so other models are rejected.
pub fn estimate_importance(
    model: &DiffusionModel,
    tilt: &Tilt,
    cell: McCell,
    cfg: &McConfig,
    event: &EventSpec,
) -> Result<McRecord> {
    cfg.validate(model)?;
    event.validate(model.dim())?;
    check_cell(cell)?;
    if !model.has_constant_diffusion() {
        return Err(Error::invalid("importance sampling needs a constant diffusion matrix"));
    }
    let sim = cfg.sim(cell, cfg.seed)?;
    let draws = draw(model, Some(tilt), &sim, &cfg.start(model), event)?;
    Ok(record(cell, event, &draws, EstimatorKind::Importance))
}

/// Sampler for the window around `q`, built from the optimizer's solution:
/// its minimizing orbit, or its multiplier `λ = s'(q)` for the work tilt.
pub fn tilt_for(model: &DiffusionModel, q: f64, optimizer: &OptimizerConfig, kind: TiltKind) -> Result<Tilt> {
    let point = rate_point(model, q, optimizer)?;
    match point.measure {
        Some(m) if !point.infeasible => match kind {
            TiltKind::Orbit => Ok(Tilt::Orbit(TiltedDrift::new(model, m.into_path())?)),
            TiltKind::Work => Ok(Tilt::Work { lambda: point.lambda }),
        },
        _ => Err(Error::Infeasible(format!("no loop carries work {q}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtConfig {
    pub mc: McConfig,
    /// Windows with fewer direct hits are re-estimated by importance
    /// sampling.
    pub min_hits: usize,
    pub tilt: TiltKind,
    pub optimizer: OptimizerConfig,
}

impl Default for FtConfig {
    fn default() -> Self {
        FtConfig {
            mc: McConfig::default(),
            min_hits: 30,
            tilt: TiltKind::Work,
            optimizer: OptimizerConfig::default().with_nodes(64),
        }
    }
}

/// Empirical fluctuation-theorem ratio for the windows around `±q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtRatio {
    pub q: f64,
    /// `log p̂(q) - log p̂(-q)`.
    pub log_ratio: f64,
    /// `ε⁻¹ T q`.
    pub predicted: f64,
    pub plus: McRecord,
    pub minus: McRecord,
    /// Set when either window has no hits or an unreliable weighted estimate.
    pub flagged: bool,
}

impl FtRatio {
    pub fn ratio(&self) -> f64 {
        if self.predicted == 0.0 {
            if self.log_ratio == 0.0 {
                1.0
            } else {
                f64::NAN
            }
        } else {
            self.log_ratio / self.predicted
        }
    }
}

/// Each window's estimate depends on its center alone (seeded by it), so
/// `ft_ratio(-q)` is exactly the negation of `ft_ratio(q)`.
fn window_estimate(model: &DiffusionModel, cell: McCell, center: f64, delta: f64, cfg: &FtConfig) -> Result<McRecord> {
    let event = EventSpec::work(center).with_delta(delta);
    let mc = McConfig {
        seed: rng::derive_seed(cfg.mc.seed, center.to_bits()),
        ..cfg.mc.clone()
    };
    let direct = estimate_direct(model, &[cell], &mc, &event)?.remove(0);
    if direct.hits >= cfg.min_hits || !model.has_constant_diffusion() {
        return Ok(direct);
    }
    let tilt = tilt_for(model, center, &cfg.optimizer, cfg.tilt)?;
    let mc = McConfig {
        seed: rng::derive_seed(mc.seed, 1),
        ..mc
    };
    estimate_importance(model, &tilt, cell, &mc, &event)
}

pub fn ft_ratio(model: &DiffusionModel, eps: f64, horizon: f64, q: f64, delta: f64, cfg: &FtConfig) -> Result<FtRatio> {
    let cell = McCell { eps, horizon };
    check_cell(cell)?;
    let plus = window_estimate(model, cell, q, delta, cfg)?;
    let minus = if q == 0.0 {
        plus.clone()
    } else {
        window_estimate(model, cell, -q, delta, cfg)?
    };
    let flagged = [&plus, &minus].iter().any(|r| r.hits == 0 || !r.reliable || !r.valid);
    Ok(FtRatio {
        q,
        log_ratio: plus.log_phat - minus.log_phat,
        predicted: horizon * q / eps,
        plus,
        minus,
        flagged,
    })
}

/// `(1/n) Σ f(X_k)` over nodes `k ∈ [start, steps)`: the left-point
/// Riemann average of `f` over the kept time span.
fn time_average(path: &DiscretePath, f: &GridFunction, start: usize) -> f64 {
    let steps = path.grid().steps();
    let total: f64 = (start..steps).map(|k| f.eval(path.node(k))).sum();
    total / (steps - start) as f64
}

/// Regular histogram on a box, one axis per state coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub bins: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub spec: HistogramSpec,
    /// Row-major over axes, `bins^n` entries.
    pub counts: Vec<u64>,
    /// Samples outside the box.
    pub outside: u64,
}

impl Histogram {
    fn new(spec: HistogramSpec) -> Self {
        let size = spec.bins.pow(spec.lower.len() as u32);
        Histogram {
            spec,
            counts: vec![0; size],
            outside: 0,
        }
    }

    fn add(&mut self, x: &[f64]) {
        let bins = self.spec.bins;
        let mut index = 0;
        for (i, &v) in x.iter().enumerate() {
            let (lo, hi) = (self.spec.lower[i], self.spec.upper[i]);
            if !(v >= lo && v <= hi) {
                self.outside += 1;
                return;
            }
            let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            index = index * bins + b.min(bins - 1);
        }
        self.counts[index] += 1;
    }

    /// Empirical density on the bins, normalized over all samples.
    pub fn density(&self) -> Vec<f64> {
        let total = self.counts.iter().sum::<u64>() + self.outside;
        let volume: f64 = self
            .spec
            .lower
            .iter()
            .zip(&self.spec.upper)
            .map(|(lo, hi)| (hi - lo) / self.spec.bins as f64)
            .product();
        self.counts
            .iter()
            .map(|&c| c as f64 / (total.max(1) as f64 * volume))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OccupationStats {
    /// `A_T / T` per path over the kept span.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std_error: f64,
    /// Discarded initial time.
    pub burn_in: f64,
    pub histogram: Histogram,
}

/// Slowest linear relaxation time `1 / min |Re λ(Db(x))|` at `x`.
pub fn relaxation_time(model: &DiffusionModel, x: &[f64]) -> Result<f64> {
    let n = model.dim();
    let mut jac = [0.0; MAT];
    model.drift_jacobian_into(x, &mut jac);
    let m = DMatrix::from_row_slice(n, n, &jac[..n * n]);
    let slowest = m
        .complex_eigenvalues()
        .iter()
        .map(|l| l.re.abs())
        .fold(f64::INFINITY, f64::min);
    if !(slowest > 0.0) {
        return Err(Error::invalid("drift Jacobian has a purely imaginary or zero eigenvalue"));
    }
    Ok(1.0 / slowest)
}

/// Time averages of `f` and the histogram of visited nodes, after
/// discarding `burn_in` time units from each path.
pub fn occupation_stats(
    paths: &[DiscretePath],
    f: &GridFunction,
    burn_in: f64,
    histogram: HistogramSpec,
) -> Result<OccupationStats> {
    let first = paths.first().ok_or_else(|| Error::invalid("no paths"))?;
    let grid = *first.grid();
    let n = first.dim();
    if paths.iter().any(|p| p.grid() != &grid || p.dim() != n) {
        return Err(Error::invalid("paths must share one time grid and dimension"));
    }
    f.validate(n)?;
    if histogram.lower.len() != n || histogram.upper.len() != n || histogram.bins == 0 {
        return Err(Error::invalid("histogram box must match the state dimension"));
    }
    if histogram.lower.iter().zip(&histogram.upper).any(|(lo, hi)| !(lo < hi)) {
        return Err(Error::invalid("histogram bounds must satisfy lower < upper"));
    }
    if !(burn_in >= 0.0) {
        return Err(Error::invalid("burn-in must be nonnegative"));
    }
    let start = (burn_in / grid.dt()).ceil() as usize;
    if start >= grid.steps() {
        return Err(Error::invalid("burn-in leaves no samples"));
    }
    let values: Vec<f64> = paths.iter().map(|p| time_average(p, f, start)).collect();
    let mut hist = Histogram::new(histogram);
    for p in paths {
        for k in start..grid.steps() {
            hist.add(p.node(k));
        }
    }
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let std_error = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0) / m).sqrt()
    } else {
        f64::NAN
    };
    Ok(OccupationStats {
        values,
        mean,
        std_error,
        burn_in: start as f64 * grid.dt(),
        histogram: hist,
    })
}

pub const CSV_HEADER: [&str; 13] = [
    "eps", "T", "q", "delta", "M", "hits", "phat", "ci_lo", "ci_hi", "rate", "rate_lo", "rate_hi", "kind",
];

pub fn write_records_csv<W: Write>(records: &[McRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for r in records {
        let f = format_float;
        w.write_record([
            f(r.eps),
            f(r.horizon),
            f(r.q),
            f(r.delta),
            r.samples.to_string(),
            r.hits.to_string(),
            f(r.phat),
            f(r.ci_lo),
            f(r.ci_hi),
            f(r.rate),
            f(r.rate_lo),
            f(r.rate_hi),
            r.kind.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One JSON object per line; infinities are written as `null`.
pub fn write_records_jsonl<W: Write>(records: &[McRecord], mut writer: W) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}
