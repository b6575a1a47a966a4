//! Discrete paths on uniform grids and the path surgery used throughout:
//! periodization, translation, time reversal, mollification, the
//! continuity modulus and affine bridges.
//!
//! Paths are stored at grid nodes and read with piecewise-linear
//! interpolation in between.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_k = k T / N`, `k = 0..=N`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::invalid(format!("need at least 2 steps, got {steps}")));
        }
        Ok(TimeGrid { horizon, steps })
    }

    /// Grid with step as close as possible to `dt`.
    pub fn with_step(horizon: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("time step must be positive"));
        }
        Self::new(horizon, ((horizon / dt).round() as usize).max(2))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
    pub fn time(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }
}

/// Nodes `X_0..=X_N` of a path on a [`TimeGrid`], flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretePath {
    grid: TimeGrid,
    dim: usize,
    nodes: Vec<f64>,
}

impl DiscretePath {
    pub fn new(grid: TimeGrid, dim: usize, nodes: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if nodes.len() != (grid.steps() + 1) * dim {
            return Err(Error::invalid(format!(
                "expected {} node coordinates, got {}",
                (grid.steps() + 1) * dim,
                nodes.len()
            )));
        }
        if nodes.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("path has non-finite nodes"));
        }
        Ok(DiscretePath { grid, dim, nodes })
    }

    /// Samples `f(t_k)` at every node.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64) -> Vec<f64>) -> Result<Self> {
        let mut nodes = Vec::with_capacity((grid.steps() + 1) * dim);
        for k in 0..=grid.steps() {
            let x = f(grid.time(k));
            if x.len() != dim {
                return Err(Error::invalid("sample has the wrong dimension"));
            }
            nodes.extend(x);
        }
        Self::new(grid, dim, nodes)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.grid.steps() + 1
    }
    pub fn is_empty(&self) -> bool {
        false
    }
    pub fn node(&self, k: usize) -> &[f64] {
        &self.nodes[k * self.dim..(k + 1) * self.dim]
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    pub fn first(&self) -> &[f64] {
        self.node(0)
    }
    pub fn last(&self) -> &[f64] {
        self.node(self.grid.steps())
    }

    /// Linear interpolation at `t ∈ [0, T]`.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let n = self.grid.steps();
        let s = (t / self.grid.dt()).clamp(0.0, n as f64);
        let k = (s.floor() as usize).min(n - 1);
        let w = s - k as f64;
        let (a, b) = (self.node(k), self.node(k + 1));
        a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
    }

    /// Writes `t,x1,..,xn` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.dim).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec = vec![format_float(self.grid.time(k))];
            rec.extend(self.node(k).iter().map(|v| format_float(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the CSV written by [`DiscretePath::write_csv`]. Times must be
    /// uniform and start at zero.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r.headers()?.clone();
        if header.get(0) != Some("t") || header.len() < 2 {
            return Err(Error::Io("path CSV must start with a `t` column".into()));
        }
        let dim = header.len() - 1;
        let mut times = Vec::new();
        let mut nodes = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Io(format!("bad number `{s}`: {e}")))
            };
            times.push(parse(&rec[0])?);
            for i in 1..=dim {
                nodes.push(parse(&rec[i])?);
            }
        }
        if times.len() < 3 || times[0].abs() > 1e-12 {
            return Err(Error::Io("path CSV needs at least 3 rows starting at t = 0".into()));
        }
        let steps = times.len() - 1;
        let grid = TimeGrid::new(times[steps], steps)?;
        for (k, t) in times.iter().enumerate() {
            if (t - grid.time(k)).abs() > 1e-9 * grid.horizon().max(1.0) {
                return Err(Error::Io("path CSV times are not uniform".into()));
            }
        }
        Self::new(grid, dim, nodes)
    }
}

pub(crate) fn format_float(v: f64) -> String {
    // Shortest representation that round-trips.
    format!("{v:?}")
}

/// A closed path with `X_0 = X_N`, read as one period of an `S`-periodic
/// path. Closure holds exactly because node `N` is a copy of node 0.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicPath {
    path: DiscretePath,
}

impl PeriodicPath {
    /// Builds from the `N` distinct nodes `X_0..X_{N-1}` (flattened).
    pub fn from_loop(period: f64, dim: usize, loop_nodes: &[f64]) -> Result<Self> {
        if dim == 0 || !loop_nodes.len().is_multiple_of(dim) {
            return Err(Error::invalid("loop length is not a multiple of the dimension"));
        }
        let steps = loop_nodes.len() / dim;
        let grid = TimeGrid::new(period, steps)?;
        let mut nodes = Vec::with_capacity(loop_nodes.len() + dim);
        nodes.extend_from_slice(loop_nodes);
        nodes.extend_from_slice(&loop_nodes[..dim]);
        Ok(PeriodicPath {
            path: DiscretePath::new(grid, dim, nodes)?,
        })
    }

    /// Samples one period of `f` at `N` nodes.
    pub fn from_fn(period: f64, steps: usize, dim: usize, mut f: impl FnMut(f64) -> Vec<f64>) -> Result<Self> {
        let mut nodes = Vec::with_capacity(steps * dim);
        for k in 0..steps {
            let x = f(period * k as f64 / steps as f64);
            if x.len() != dim {
                return Err(Error::invalid("sample has the wrong dimension"));
            }
            nodes.extend(x);
        }
        Self::from_loop(period, dim, &nodes)
    }

    /// Closes a path whose endpoints agree to `tol`.
    pub fn from_closed(path: DiscretePath, tol: f64) -> Result<Self> {
        let gap = path
            .first()
            .iter()
            .zip(path.last())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if gap > tol {
            return Err(Error::invalid(format!("path is not closed: endpoint gap {gap}")));
        }
        let n = path.grid().steps();
        Self::from_loop(path.grid().horizon(), path.dim(), &path.nodes()[..n * path.dim()])
    }

    pub fn period(&self) -> f64 {
        self.path.grid().horizon()
    }
    /// Number of distinct nodes per period.
    pub fn steps(&self) -> usize {
        self.path.grid().steps()
    }
    pub fn dim(&self) -> usize {
        self.path.dim()
    }
    pub fn dt(&self) -> f64 {
        self.path.grid().dt()
    }
    pub fn as_path(&self) -> &DiscretePath {
        &self.path
    }
    pub fn into_path(self) -> DiscretePath {
        self.path
    }
    /// Node `k` modulo the period.
    pub fn node(&self, k: isize) -> &[f64] {
        let n = self.steps() as isize;
        self.path.node(k.rem_euclid(n) as usize)
    }
    /// The `N` distinct nodes, flattened.
    pub fn loop_nodes(&self) -> &[f64] {
        &self.path.nodes()[..self.steps() * self.dim()]
    }

    /// Same nodes on a different period.
    pub fn with_period(&self, period: f64) -> Result<Self> {
        Self::from_loop(period, self.dim(), self.loop_nodes())
    }

    /// Value and centered-difference velocity at any real `t`, both
    /// interpolated linearly between nodes.
    pub fn value_and_velocity(&self, t: f64, value: &mut [f64], velocity: &mut [f64]) {
        let n = self.steps();
        let d = self.dim();
        let dt = self.dt();
        let s = (t / dt).rem_euclid(n as f64);
        let k = (s.floor() as usize).min(n - 1);
        let w = s - k as f64;
        let k = k as isize;
        for i in 0..d {
            let x0 = self.node(k)[i];
            let x1 = self.node(k + 1)[i];
            let v0 = (self.node(k + 1)[i] - self.node(k - 1)[i]) / (2.0 * dt);
            let v1 = (self.node(k + 2)[i] - self.node(k)[i]) / (2.0 * dt);
            value[i] = x0 + w * (x1 - x0);
            velocity[i] = v0 + w * (v1 - v0);
        }
    }
}

/// The `S`-holonomic measure carried by the translates of one closed path.
#[derive(Clone, Debug, PartialEq)]
pub struct HolonomicMeasure {
    path: PeriodicPath,
}

impl HolonomicMeasure {
    pub fn new(path: PeriodicPath) -> Self {
        HolonomicMeasure { path }
    }
    pub fn path(&self) -> &PeriodicPath {
        &self.path
    }
    pub fn period(&self) -> f64 {
        self.path.period()
    }
    pub fn into_path(self) -> PeriodicPath {
        self.path
    }
}

/// Value of the `T`-periodization at time `t`, and the jump `X_0 - X_T`
/// it carries at multiples of `T`.
pub fn periodize(path: &DiscretePath, t: f64) -> (Vec<f64>, Vec<f64>) {
    let horizon = path.grid().horizon();
    let mut local = t - (t / horizon).floor() * horizon;
    if local >= horizon {
        local = 0.0;
    }
    let jump = path.first().iter().zip(path.last()).map(|(a, b)| a - b).collect();
    (path.value_at(local), jump)
}

/// `(θ_s X)_t = X_{t-s}`, with the shift rounded to whole grid steps.
pub fn translate(p: &PeriodicPath, s: f64) -> PeriodicPath {
    let n = p.steps() as i64;
    let shift = (s / p.dt()).round() as i64;
    let d = p.dim();
    let mut nodes = Vec::with_capacity(p.loop_nodes().len());
    for k in 0..n {
        nodes.extend_from_slice(p.node((k - shift) as isize));
    }
    PeriodicPath::from_loop(p.period(), d, &nodes).expect("translation preserves validity")
}

/// `(ΘX)_t = X_{-t}`: node order reversed about node 0.
pub fn time_reverse(p: &PeriodicPath) -> PeriodicPath {
    let n = p.steps() as isize;
    let mut nodes = Vec::with_capacity(p.loop_nodes().len());
    for k in 0..n {
        nodes.extend_from_slice(p.node(-k));
    }
    PeriodicPath::from_loop(p.period(), p.dim(), &nodes).expect("reversal preserves validity")
}

/// Normalizing constant of `(4u(1-u))³` on `(0,1)`.
const BUMP_NORM: f64 = 35.0 / 16.0;

/// Mollifier `ι_δ(s) = (C/δ) (4s/δ (1 - s/δ))³` on `(0, δ)`.
pub fn bump(s: f64, delta: f64) -> f64 {
    if s <= 0.0 || s >= delta {
        return 0.0;
    }
    let u = s / delta;
    let p = 4.0 * u * (1.0 - u);
    BUMP_NORM / delta * p * p * p
}

/// `ι_δ'(s)`.
pub fn bump_derivative(s: f64, delta: f64) -> f64 {
    if s <= 0.0 || s >= delta {
        return 0.0;
    }
    let u = s / delta;
    let p = 4.0 * u * (1.0 - u);
    BUMP_NORM / (delta * delta) * 3.0 * p * p * 4.0 * (1.0 - 2.0 * u)
}

/// Result of [`mollify`]: the smoothed path and its time derivative.
#[derive(Clone, Debug)]
pub struct Mollified {
    pub smooth: DiscretePath,
    pub derivative: DiscretePath,
}

/// Discrete convolution with [`bump`] and its derivative. Closed input
/// paths (`X_0 = X_N`) are convolved circularly and stay closed; other
/// paths are extended to negative times by the constant `X_0`.
pub fn mollify(path: &DiscretePath, delta: f64) -> Result<Mollified> {
    let grid = *path.grid();
    let dt = grid.dt();
    if !(delta > 0.0) || !(delta < grid.horizon() / 4.0) {
        return Err(Error::invalid(format!(
            "mollifier width must lie in (0, T/4), got {delta}"
        )));
    }
    if delta < 2.0 * dt {
        return Err(Error::invalid("mollifier width must span at least two grid steps"));
    }
    let reach = (delta / dt).ceil() as usize;
    let raw: Vec<f64> = (0..=reach).map(|j| bump(j as f64 * dt, delta) * dt).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let dweights: Vec<f64> = (0..=reach)
        .map(|j| bump_derivative(j as f64 * dt, delta) * dt)
        .collect();

    let n = grid.steps();
    let d = path.dim();
    let closed = path.first() == path.last();
    let index = |k: isize| -> usize {
        if closed {
            k.rem_euclid(n as isize) as usize
        } else {
            k.max(0) as usize
        }
    };
    let mut smooth = vec![0.0; (n + 1) * d];
    let mut deriv = vec![0.0; (n + 1) * d];
    let last = if closed { n } else { n + 1 };
    for k in 0..last {
        for j in 0..=reach {
            let src = path.node(index(k as isize - j as isize));
            let here = path.node(k);
            for i in 0..d {
                smooth[k * d + i] += weights[j] * src[i];
                // Differences against X_k make constants map to zero exactly.
                deriv[k * d + i] += dweights[j] * (src[i] - here[i]);
            }
        }
    }
    if closed {
        for i in 0..d {
            smooth[n * d + i] = smooth[i];
            deriv[n * d + i] = deriv[i];
        }
    }
    Ok(Mollified {
        smooth: DiscretePath::new(grid, d, smooth)?,
        derivative: DiscretePath::new(grid, d, deriv)?,
    })
}

/// Circular mollification of a periodic path.
pub fn mollify_periodic(p: &PeriodicPath, delta: f64) -> Result<(PeriodicPath, PeriodicPath)> {
    let m = mollify(p.as_path(), delta)?;
    Ok((
        PeriodicPath::from_closed(m.smooth, 0.0)?,
        PeriodicPath::from_closed(m.derivative, 0.0)?,
    ))
}

/// `max |X_t - X_s|` over grid times `s, t ∈ [t1, t2]` with `|t - s| < δ`.
pub fn continuity_modulus(path: &DiscretePath, delta: f64, t1: f64, t2: f64) -> Result<f64> {
    let grid = path.grid();
    let dt = grid.dt();
    if !(delta > 0.0) {
        return Err(Error::invalid("delta must be positive"));
    }
    let tol = 1e-9;
    let lo = ((t1 / dt) - tol).ceil().max(0.0) as usize;
    let hi = (((t2 / dt) + tol).floor() as usize).min(grid.steps());
    if !(t2 >= t1) || lo > hi {
        return Err(Error::invalid(format!("empty window [{t1}, {t2}]")));
    }
    // Largest lag j with j dt < δ.
    let lag = (((delta / dt) * (1.0 - 1e-12)).ceil() as usize).saturating_sub(1);
    let mut best: f64 = 0.0;
    for s in lo..=hi {
        for t in s + 1..=(s + lag).min(hi) {
            let dist = path
                .node(s)
                .iter()
                .zip(path.node(t))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.max(dist);
        }
    }
    Ok(best)
}

/// Nodes of `x (1 - t/T) + y t/T` on `grid`.
pub fn affine_bridge(x: &[f64], y: &[f64], grid: TimeGrid) -> Result<DiscretePath> {
    if x.len() != y.len() {
        return Err(Error::invalid("bridge endpoints differ in dimension"));
    }
    let n = grid.steps();
    let mut nodes = Vec::with_capacity((n + 1) * x.len());
    for k in 0..=n {
        if k == n {
            nodes.extend_from_slice(y);
        } else {
            let t = k as f64 / n as f64;
            nodes.extend(x.iter().zip(y).map(|(a, b)| a * (1.0 - t) + b * t));
        }
    }
    DiscretePath::new(grid, x.len(), nodes)
}
