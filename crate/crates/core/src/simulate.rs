//! Euler-Maruyama integration of the diffusion and of its tilted,
//! time-dependent counterpart, with Girsanov log-weights and
//! order-independent batch execution.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action;
use crate::error::{Error, Result};
use crate::linalg::{self, MAT, MAX_DIM};
use crate::model::{BlendedPotential, DiffusionModel, ScalarPotential};
use crate::paths::{DiscretePath, PeriodicPath, TimeGrid};
use crate::rng;

/// Default explosion radius.
pub const DEFAULT_MAX_RADIUS: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub eps: f64,
    pub grid: TimeGrid,
    pub seed: u64,
    pub max_radius: f64,
    pub batch: usize,
}

impl SimConfig {
    pub fn new(eps: f64, grid: TimeGrid, seed: u64) -> Result<Self> {
        let cfg = SimConfig {
            eps,
            grid,
            seed,
            max_radius: DEFAULT_MAX_RADIUS,
            batch: 1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_batch(mut self, batch: usize) -> Self {
        self.batch = batch;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !self.eps.is_finite() {
            return Err(Error::invalid(format!("noise strength must be positive, got {}", self.eps)));
        }
        if !(self.max_radius > 0.0) {
            return Err(Error::invalid("explosion radius must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Noise source for the integrator. `Off` is a test hook that integrates
/// the deterministic flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Gaussian,
    Off,
}

/// A (possibly time-dependent) SDE `dX = drift dt + sqrt(2ε) σ dw`.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]);
    fn noise_factor(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;
}

impl Dynamics for DiffusionModel {
    fn dim(&self) -> usize {
        DiffusionModel::dim(self)
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        self.drift_into(x, out);
    }
    fn noise_factor(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.noise_factor_into(x, out)
    }
}

/// Drift that confines the process around a reference orbit `Y`:
/// `b̃(t,x) = -a(x - Y_t)∇U(x - Y_t) + ε(∇·a)(x - Y_t) + Ẏ_t`, with noise
/// factor `σ(x - Y_t)`.
#[derive(Clone, Debug)]
pub struct TiltedDrift {
    reference: PeriodicPath,
    potential: Arc<dyn ScalarPotential>,
    compact_radius: f64,
}

impl TiltedDrift {
    /// Uses `U = V` when `V` has a unique nondegenerate minimum at the
    /// origin, otherwise a quadratic core blended into `V` on `1.5 ≤ |x| ≤ 2`.
    pub fn new(model: &DiffusionModel, reference: PeriodicPath) -> Result<Self> {
        let v = model.potential().clone();
        if v.has_unique_minimum_at_origin() {
            Self::with_potential(model, reference, v, 0.0)
        } else {
            let u = BlendedPotential::new(v, 1.0, 1.5, 2.0)?;
            let radius = u.outer_radius();
            Self::with_potential(model, reference, Arc::new(u), radius)
        }
    }

    /// Checks on sample points that `U = V` outside `compact_radius` and
    /// that `U` has a strict, nondegenerate minimum at the origin.
    pub fn with_potential(
        model: &DiffusionModel,
        reference: PeriodicPath,
        potential: Arc<dyn ScalarPotential>,
        compact_radius: f64,
    ) -> Result<Self> {
        let n = model.dim();
        if reference.dim() != n || potential.dim() != n {
            return Err(Error::invalid("reference orbit and confining potential must match the model dimension"));
        }
        let origin = [0.0; MAX_DIM];
        let mut h = [0.0; MAT];
        potential.hessian(&origin[..n], &mut h);
        if !(linalg::min_eigenvalue(&h, n) > 0.0) {
            return Err(Error::invalid("confining potential must have a positive definite Hessian at 0"));
        }
        let u0 = potential.value(&origin[..n]);
        for x in probe_points(n) {
            let r = linalg::norm(&x);
            let u = potential.value(&x);
            if r > 1e-9 && !(u > u0) {
                return Err(Error::invalid("confining potential must be uniquely minimized at 0"));
            }
            if r > compact_radius && u != model.potential().value(&x) {
                return Err(Error::invalid(format!(
                    "confining potential differs from V outside radius {compact_radius}"
                )));
            }
        }
        Ok(TiltedDrift {
            reference,
            potential,
            compact_radius,
        })
    }

    pub fn reference(&self) -> &PeriodicPath {
        &self.reference
    }
    pub fn potential(&self) -> &Arc<dyn ScalarPotential> {
        &self.potential
    }
    pub fn compact_radius(&self) -> f64 {
        self.compact_radius
    }

    pub fn drift_into(&self, model: &DiffusionModel, eps: f64, t: f64, x: &[f64], out: &mut [f64]) {
        let n = model.dim();
        let mut y = [0.0; MAX_DIM];
        let mut ydot = [0.0; MAX_DIM];
        self.reference.value_and_velocity(t, &mut y, &mut ydot);
        let mut z = [0.0; MAX_DIM];
        for i in 0..n {
            z[i] = x[i] - y[i];
        }
        let mut g = [0.0; MAX_DIM];
        let mut a = [0.0; MAT];
        let mut div = [0.0; MAX_DIM];
        self.potential.gradient(&z[..n], &mut g);
        model.diffusion().value(&z[..n], &mut a);
        model.diffusion().divergence(&z[..n], &mut div);
        for i in 0..n {
            let ag: f64 = (0..n).map(|j| a[i * n + j] * g[j]).sum();
            out[i] = -ag + eps * div[i] + ydot[i];
        }
    }

    pub fn noise_factor_into(&self, model: &DiffusionModel, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = model.dim();
        let mut y = [0.0; MAX_DIM];
        let mut ydot = [0.0; MAX_DIM];
        self.reference.value_and_velocity(t, &mut y, &mut ydot);
        let mut z = [0.0; MAX_DIM];
        for i in 0..n {
            z[i] = x[i] - y[i];
        }
        model.noise_factor_into(&z[..n], out)
    }

    /// Binds the drift to a model and noise strength.
    pub fn dynamics<'a>(&'a self, model: &'a DiffusionModel, eps: f64) -> TiltedDynamics<'a> {
        TiltedDynamics {
            model,
            tilt: self,
            eps,
        }
    }
}

fn probe_points(n: usize) -> Vec<Vec<f64>> {
    let radii = [0.1, 0.5, 1.0, 1.7, 2.5, 4.0, 7.0];
    let mut pts = Vec::new();
    for &r in &radii {
        for k in 0..16 {
            let th = 2.0 * std::f64::consts::PI * (k as f64 + 0.25) / 16.0;
            let p = match n {
                1 => vec![if k % 2 == 0 { r } else { -r }],
                2 => vec![r * th.cos(), r * th.sin()],
                _ => {
                    let z = ((k as f64 + 0.5) / 8.0 - 1.0).clamp(-1.0, 1.0);
                    let s = (1.0 - z * z).sqrt();
                    let mut v = vec![r * s * th.cos(), r * s * th.sin(), r * z];
                    v.truncate(n);
                    v
                }
            };
            pts.push(p);
        }
    }
    pts
}

/// [`TiltedDrift`] bound to a model and noise strength.
pub struct TiltedDynamics<'a> {
    model: &'a DiffusionModel,
    tilt: &'a TiltedDrift,
    eps: f64,
}

impl Dynamics for TiltedDynamics<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn drift(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.tilt.drift_into(self.model, self.eps, t, x, out);
    }
    fn noise_factor(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.tilt.noise_factor_into(self.model, t, x, out)
    }
}

/// Euler-Maruyama path of any [`Dynamics`] driven by stream `stream` of
/// the configured seed.
pub fn integrate<D: Dynamics + ?Sized>(
    dynamics: &D,
    cfg: &SimConfig,
    x0: &[f64],
    stream: u64,
    noise: NoiseMode,
) -> Result<DiscretePath> {
    cfg.validate()?;
    let n = dynamics.dim();
    if x0.len() != n || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial point must be finite and match the model dimension"));
    }
    let steps = cfg.grid.steps();
    let dt = cfg.grid.dt();
    let scale = (2.0 * cfg.eps * dt).sqrt();
    let mut rng = rng::stream(cfg.seed, stream);
    let mut nodes = Vec::with_capacity((steps + 1) * n);
    nodes.extend_from_slice(x0);
    let mut x = [0.0; MAX_DIM];
    x[..n].copy_from_slice(x0);
    let mut b = [0.0; MAX_DIM];
    let mut sigma = [0.0; MAT];
    let mut xi = [0.0; MAX_DIM];
    for k in 0..steps {
        let t = k as f64 * dt;
        dynamics.drift(t, &x[..n], &mut b);
        if noise == NoiseMode::Gaussian {
            dynamics.noise_factor(t, &x[..n], &mut sigma)?;
            for v in xi[..n].iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        let mut r2 = 0.0;
        for i in 0..n {
            let kick = if noise == NoiseMode::Gaussian {
                (0..=i).map(|j| sigma[i * n + j] * xi[j]).sum::<f64>()
            } else {
                0.0
            };
            x[i] += b[i] * dt + scale * kick;
            r2 += x[i] * x[i];
        }
        if !(r2.sqrt() <= cfg.max_radius) {
            return Err(Error::Explosion {
                step: k + 1,
                radius: cfg.max_radius,
            });
        }
        nodes.extend_from_slice(&x[..n]);
    }
    DiscretePath::new(cfg.grid, n, nodes)
}

/// Euler-Maruyama path of the model itself (stream 0).
pub fn euler_maruyama(model: &DiffusionModel, cfg: &SimConfig, x0: &[f64]) -> Result<DiscretePath> {
    integrate(model, cfg, x0, 0, NoiseMode::Gaussian)
}

/// Euler-Maruyama path of the tilted dynamics (stream 0).
pub fn simulate_tilted(
    model: &DiffusionModel,
    tilt: &TiltedDrift,
    cfg: &SimConfig,
    x0: &[f64],
) -> Result<DiscretePath> {
    integrate(&tilt.dynamics(model, cfg.eps), cfg, x0, 0, NoiseMode::Gaussian)
}

/// `log dP/dQ` along `path`, with `P` the law of the model and `Q` the
/// tilted law: `-M_T + ½⟨M⟩_T` evaluated with left-point (Itô) sums.
///
/// For constant diffusion matrices this coincides with the exact
/// log-likelihood ratio of the two Euler-Maruyama chains.
pub fn girsanov_log_weight(
    model: &DiffusionModel,
    tilt: &TiltedDrift,
    eps: f64,
    path: &DiscretePath,
) -> Result<f64> {
    if tilt.reference().dim() != model.dim() {
        return Err(Error::invalid("path, tilt and model dimensions differ"));
    }
    log_likelihood_ratio(model, &tilt.dynamics(model, eps), eps, path)
}

/// `log dP/dQ` for any dynamics `Q` sharing the model's noise, as in
/// [`girsanov_log_weight`].
pub fn log_likelihood_ratio<D: Dynamics + ?Sized>(
    model: &DiffusionModel,
    tilted: &D,
    eps: f64,
    path: &DiscretePath,
) -> Result<f64> {
    let n = model.dim();
    if path.dim() != n || tilted.dim() != n {
        return Err(Error::invalid("path, tilt and model dimensions differ"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("noise strength must be positive"));
    }
    let grid = path.grid();
    let dt = grid.dt();
    let mut martingale = 0.0;
    let mut variation = 0.0;
    let mut b = [0.0; MAX_DIM];
    let mut bt = [0.0; MAX_DIM];
    let mut inv = [0.0; MAT];
    let mut diff = [0.0; MAX_DIM];
    let mut incr = [0.0; MAX_DIM];
    for k in 0..grid.steps() {
        let x = path.node(k);
        let x1 = path.node(k + 1);
        model.drift_into(x, &mut b);
        tilted.drift(grid.time(k), x, &mut bt);
        model.inverse_diffusion_into(x, &mut inv)?;
        for i in 0..n {
            diff[i] = bt[i] - b[i];
            incr[i] = x1[i] - x[i] - b[i] * dt;
        }
        martingale += linalg::bilinear(&diff[..n], &inv, &incr[..n], n);
        variation += linalg::bilinear(&diff[..n], &inv, &diff[..n], n) * dt;
    }
    let scale = 1.0 / (2.0 * eps);
    Ok(-scale * martingale + 0.5 * scale * variation)
}

/// The model with drift `b + 2λ a f`, `f = a⁻¹c`. Relative to the model its
/// paths are reweighted by `exp(λ T W / ε)` times a time-additive
/// functional, which makes it a sampler for work values near the slope
/// `λ` of the rate function.
#[derive(Clone, Copy, Debug)]
pub struct WorkTilt<'a> {
    pub model: &'a DiffusionModel,
    pub lambda: f64,
}

impl Dynamics for WorkTilt<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn drift(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let n = self.model.dim();
        let mut f = [0.0; MAX_DIM];
        let mut a = [0.0; MAT];
        self.model.drift_into(x, out);
        self.model.work_field_into(x, &mut f);
        self.model.diffusion().value(x, &mut a);
        let mut af = [0.0; MAX_DIM];
        linalg::mat_vec(&a, &f[..n], n, &mut af);
        for i in 0..n {
            out[i] += 2.0 * self.lambda * af[i];
        }
    }
    fn noise_factor(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.model.noise_factor_into(x, out)
    }
}

/// Runs `f(i)` for `i in 0..m` in parallel and returns the results in index
/// order, so aggregates do not depend on the thread count.
pub fn batch_map<T: Send>(m: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    (0..m).into_par_iter().map(f).collect()
}

/// Which law a batch is sampled from.
#[derive(Clone, Copy, Debug)]
pub enum Sampler<'a> {
    Direct,
    Tilted(&'a TiltedDrift),
}

/// Per-trajectory summary, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub index: usize,
    pub endpoint: Vec<f64>,
    /// Stratonovich Gallavotti-Cohen observable per unit time.
    #[serde(rename = "W_value")]
    pub w_value: f64,
    pub exploded: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub log_weight: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub summaries: Vec<PathSummary>,
    /// Full paths, only when requested.
    pub paths: Vec<Option<DiscretePath>>,
    pub exploded: usize,
}

/// Simulates `cfg.batch` trajectories, trajectory `i` on stream `i`.
/// Explosions are tallied per path and do not abort the batch.
pub fn batch_simulate(
    model: &DiffusionModel,
    sampler: Sampler<'_>,
    cfg: &SimConfig,
    x0: &[f64],
    keep_paths: bool,
) -> Result<Batch> {
    cfg.validate()?;
    if x0.len() != model.dim() {
        return Err(Error::invalid("initial point must match the model dimension"));
    }
    let results = batch_map(cfg.batch, |i| -> Result<(PathSummary, Option<DiscretePath>)> {
        let out = match sampler {
            Sampler::Direct => integrate(model, cfg, x0, i as u64, NoiseMode::Gaussian),
            Sampler::Tilted(tilt) => integrate(&tilt.dynamics(model, cfg.eps), cfg, x0, i as u64, NoiseMode::Gaussian),
        };
        match out {
            Ok(path) => {
                let w = action::stratonovich_work(model, &path);
                let log_weight = match sampler {
                    Sampler::Direct => None,
                    Sampler::Tilted(tilt) => Some(girsanov_log_weight(model, tilt, cfg.eps, &path)?),
                };
                let summary = PathSummary {
                    index: i,
                    endpoint: path.last().to_vec(),
                    w_value: w,
                    exploded: false,
                    log_weight,
                };
                Ok((summary, keep_paths.then_some(path)))
            }
            Err(Error::Explosion { .. }) => Ok((
                PathSummary {
                    index: i,
                    endpoint: vec![f64::NAN; model.dim()],
                    w_value: f64::NAN,
                    exploded: true,
                    log_weight: None,
                },
                None,
            )),
            Err(e) => Err(e),
        }
    });
    let mut summaries = Vec::with_capacity(cfg.batch);
    let mut paths = Vec::with_capacity(if keep_paths { cfg.batch } else { 0 });
    let mut exploded = 0;
    for r in results {
        let (s, p) = r?;
        exploded += s.exploded as usize;
        summaries.push(s);
        if keep_paths {
            paths.push(p);
        }
    }
    Ok(Batch {
        summaries,
        paths,
        exploded,
    })
}
