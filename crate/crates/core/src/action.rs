//! Discrete Freidlin-Wentzell action, the rate on holonomic measures and
//! the Gallavotti-Cohen work observable.

use serde::{Deserialize, Serialize};

use crate::linalg::{self, MAT, MAX_DIM};
use crate::model::DiffusionModel;
use crate::paths::{time_reverse, DiscretePath, HolonomicMeasure};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionValue {
    pub total: f64,
    pub per_unit_time: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcValue {
    /// Midpoint sum per unit time.
    pub stratonovich: f64,
    /// Left-point sum per unit time.
    pub ito: f64,
    /// `(ε/T) Σ tr(a Df) dt` with `f = a⁻¹c`.
    pub correction: f64,
    /// `f(X_N)·(X_0 - X_N)`, the work of closing the path.
    pub periodization_jump_term: f64,
}

/// Combined JSON record for the `action` task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionReport {
    pub total: f64,
    pub per_unit_time: f64,
    pub stratonovich: f64,
    pub ito: f64,
    pub correction: f64,
    pub jump_term: f64,
}

impl ActionReport {
    pub fn new(action: ActionValue, gc: GcValue) -> Self {
        ActionReport {
            total: action.total,
            per_unit_time: action.per_unit_time,
            stratonovich: gc.stratonovich,
            ito: gc.ito,
            correction: gc.correction,
            jump_term: gc.periodization_jump_term,
        }
    }
}

/// `(v - b(m))ᵀ a⁻¹(m) (v - b(m))` for one segment.
pub(crate) fn segment_integrand(model: &DiffusionModel, x0: &[f64], x1: &[f64], dt: f64) -> f64 {
    let n = model.dim();
    let mut m = [0.0; MAX_DIM];
    let mut r = [0.0; MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    let mut g = [0.0; MAT];
    for i in 0..n {
        m[i] = 0.5 * (x0[i] + x1[i]);
    }
    model.drift_into(&m[..n], &mut b);
    model
        .inverse_diffusion_into(&m[..n], &mut g)
        .expect("diffusion matrix lost positive definiteness");
    for i in 0..n {
        r[i] = (x1[i] - x0[i]) / dt - b[i];
    }
    linalg::bilinear(&r[..n], &g, &r[..n], n)
}

/// Midpoint-rule action `(dt/4) Σ rᵀa⁻¹r`.
pub fn fw_action(model: &DiffusionModel, path: &DiscretePath) -> ActionValue {
    assert_eq!(path.dim(), model.dim(), "path and model dimensions differ");
    let grid = path.grid();
    let dt = grid.dt();
    let sum: f64 = (0..grid.steps())
        .map(|k| segment_integrand(model, path.node(k), path.node(k + 1), dt))
        .sum();
    let total = 0.25 * dt * sum;
    ActionValue {
        total,
        per_unit_time: total / grid.horizon(),
    }
}

/// `ℐ = S⁻¹ I_[0,S](Y)`.
pub fn rate_i(model: &DiffusionModel, hm: &HolonomicMeasure) -> f64 {
    fw_action(model, hm.path().as_path()).per_unit_time
}

/// Stratonovich (midpoint) part of [`gc_observable`] alone.
pub fn stratonovich_work(model: &DiffusionModel, path: &DiscretePath) -> f64 {
    let n = model.dim();
    assert_eq!(path.dim(), n, "path and model dimensions differ");
    let grid = path.grid();
    let mut f = [0.0; MAX_DIM];
    let mut m = [0.0; MAX_DIM];
    let mut strat = 0.0;
    for k in 0..grid.steps() {
        let x0 = path.node(k);
        let x1 = path.node(k + 1);
        for i in 0..n {
            m[i] = 0.5 * (x0[i] + x1[i]);
        }
        model.work_field_into(&m[..n], &mut f);
        strat += (0..n).map(|i| f[i] * (x1[i] - x0[i])).sum::<f64>();
    }
    strat / grid.horizon()
}

pub fn gc_observable(model: &DiffusionModel, path: &DiscretePath, eps: f64) -> GcValue {
    let n = model.dim();
    assert_eq!(path.dim(), n, "path and model dimensions differ");
    let grid = path.grid();
    let dt = grid.dt();
    let mut f = [0.0; MAX_DIM];
    let mut m = [0.0; MAX_DIM];
    let mut a = [0.0; MAT];
    let mut df = [0.0; MAT];
    let (mut strat, mut ito, mut trace) = (0.0, 0.0, 0.0);
    for k in 0..grid.steps() {
        let x0 = path.node(k);
        let x1 = path.node(k + 1);
        for i in 0..n {
            m[i] = 0.5 * (x0[i] + x1[i]);
        }
        model.work_field_into(&m[..n], &mut f);
        strat += (0..n).map(|i| f[i] * (x1[i] - x0[i])).sum::<f64>();
        model.work_field_into(x0, &mut f);
        ito += (0..n).map(|i| f[i] * (x1[i] - x0[i])).sum::<f64>();
        if eps != 0.0 {
            model.diffusion().value(x0, &mut a);
            model.work_field_jacobian_into(x0, &mut df);
            trace += (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * df[j * n + i])
                .sum::<f64>();
        }
    }
    let horizon = grid.horizon();
    let last = path.last();
    let first = path.first();
    model.work_field_into(last, &mut f);
    let jump = (0..n).map(|i| f[i] * (first[i] - last[i])).sum();
    GcValue {
        stratonovich: strat / horizon,
        ito: ito / horizon,
        correction: eps * trace * dt / horizon,
        periodization_jump_term: jump,
    }
}

/// `(ℐ(ΘY) - ℐ(Y), W(Y))` for a holonomic measure.
pub fn reversal_gap(model: &DiffusionModel, hm: &HolonomicMeasure) -> (f64, f64) {
    let forward = rate_i(model, hm);
    let reversed = HolonomicMeasure::new(time_reverse(hm.path()));
    let backward = rate_i(model, &reversed);
    let w = gc_observable(model, hm.path().as_path(), 0.0).stratonovich;
    (backward - forward, w)
}

/// Fitted constant of the bound
/// `I ≥ ½[V(X_T) - V(X_0)] + γ∫(|Ẋ|² + |∇V|²)dt - C T` for one `γ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundFit {
    pub gamma: f64,
    /// Smallest `C` satisfying the bound on every sampled path.
    pub constant: f64,
    /// Path attaining the constant.
    pub worst_path: usize,
}

/// Calibrates the action lower bound on `paths`; a diagnostic, the
/// constants are model dependent.
pub fn calibrate_lower_bound(model: &DiffusionModel, paths: &[DiscretePath], gammas: &[f64]) -> Vec<LowerBoundFit> {
    let n = model.dim();
    let terms: Vec<(f64, f64, f64, f64)> = paths
        .iter()
        .map(|p| {
            let grid = p.grid();
            let dt = grid.dt();
            let mut kinetic = 0.0;
            let mut g = [0.0; MAX_DIM];
            let mut m = [0.0; MAX_DIM];
            for k in 0..grid.steps() {
                let (x0, x1) = (p.node(k), p.node(k + 1));
                for i in 0..n {
                    m[i] = 0.5 * (x0[i] + x1[i]);
                }
                model.potential().gradient(&m[..n], &mut g);
                let v2: f64 = (0..n).map(|i| ((x1[i] - x0[i]) / dt).powi(2)).sum();
                kinetic += (v2 + linalg::dot(&g[..n], &g[..n])) * dt;
            }
            let dv = 0.5 * (model.potential().value(p.last()) - model.potential().value(p.first()));
            (fw_action(model, p).total, dv, kinetic, grid.horizon())
        })
        .collect();
    gammas
        .iter()
        .map(|&gamma| {
            let mut best = LowerBoundFit {
                gamma,
                constant: f64::NEG_INFINITY,
                worst_path: 0,
            };
            for (idx, &(action, dv, kinetic, horizon)) in terms.iter().enumerate() {
                let c = (dv + gamma * kinetic - action) / horizon;
                if c > best.constant {
                    best.constant = c;
                    best.worst_path = idx;
                }
            }
            best
        })
        .collect()
}
