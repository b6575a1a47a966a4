//! Path-space minimization of the rate: unconstrained minimizers, the
//! work-constrained rate `s(q)` and its Legendre dual.

mod cyclic;
mod inner;
mod legendre;
mod objective;
mod rate;

pub use inner::InnerMethod;
pub use legendre::{biconjugate, conjugate, dual_scan, ft_defect, hull_slopes, legendre, DualScan, Legendre};
pub use rate::{
    constraint_tolerance, convexity_violations, dual_value, minimize_rate, DualPoint, minimize_rate_from, rate_curve,
    rate_point, rate_point_from, DualConfig, InitConfig, InitMode, LambdaGrid, MinimizeResult, OptimizerConfig,
    PenaltySchedule, RateCurve, RatePoint,
};

use crate::model::DiffusionModel;
use crate::paths::PeriodicPath;

/// Gradient of the discrete per-period action `(dt/4) Σ rᵀa⁻¹r` with
/// respect to the free nodes `Y_0..Y_{N-1}` (`Y_N ≡ Y_0`).
pub fn action_gradient(model: &DiffusionModel, path: &PeriodicPath) -> Vec<f64> {
    assert_eq!(path.dim(), model.dim(), "path and model dimensions differ");
    let n = model.dim();
    let nodes = path.steps();
    let dt = path.dt();
    let mut g = vec![0.0; nodes * n];
    for k in 0..nodes {
        let s = objective::segment(model, path.node(k as isize), path.node(k as isize + 1), dt);
        let k1 = (k + 1) % nodes;
        for j in 0..n {
            g[k * n + j] += 0.25 * dt * s.dphi[j];
            g[k1 * n + j] += 0.25 * dt * s.dphi[n + j];
        }
    }
    g
}
