//! Node-space solvers for a [`LoopObjective`] at fixed period.

use serde::{Deserialize, Serialize};

use super::cyclic::CyclicCholesky;
use super::objective::{LoopObjective, Terms};
use crate::linalg::{self, MAT};

/// Inner solver used at fixed period.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerMethod {
    /// Damped Newton with the exact block structure of the Hessian.
    #[default]
    Newton,
    /// Steepest descent with backtracking.
    GradientDescent,
}

#[derive(Clone, Debug)]
pub(crate) struct InnerOutcome {
    pub terms: Terms,
    pub converged: bool,
    pub work_grad_norm: f64,
}

const ARMIJO: f64 = 1e-4;

/// Minimizes `obj` from `z` in place. Every accepted step satisfies the
/// Armijo condition, so recorded values never increase.
pub(crate) fn minimize(
    obj: &LoopObjective<'_>,
    z: &mut [f64],
    method: InnerMethod,
    tol: f64,
    max_iter: usize,
    mut trace: Option<&mut Vec<f64>>,
) -> InnerOutcome {
    let len = obj.len();
    let n = obj.dim();
    let m = obj.nodes;
    let mut gr = vec![0.0; len];
    let mut gw = vec![0.0; len];
    let mut g = vec![0.0; len];
    let mut terms = obj.gradients(z, &mut gr, &mut gw, &mut g);
    if let Some(t) = trace.as_deref_mut() {
        t.push(terms.value);
    }
    let mut diag = vec![[0.0; MAT]; m];
    let mut sub = vec![[0.0; MAT]; m];
    let mut d = vec![0.0; len];
    let mut w = vec![0.0; len];
    let mut trial = vec![0.0; len];
    let mut shift = 0.0;
    let mut step = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        let gnorm = linalg::norm(&g);
        if !gnorm.is_finite() {
            break;
        }
        if gnorm <= tol {
            converged = true;
            break;
        }
        let mut accepted = None;
        match method {
            InnerMethod::Newton => {
                obj.hessian_blocks(z, terms.work, &mut diag, &mut sub);
                let scale = diag.iter().map(|b| (0..n).map(|i| b[i * n + i].abs()).sum::<f64>()).sum::<f64>()
                    / len as f64;
                let floor = 1e-12 * scale.max(1e-300);
                for _ in 0..40 {
                    let Some(chol) = CyclicCholesky::factor(n, &diag, &sub, shift) else {
                        shift = (shift * 10.0).max(floor);
                        continue;
                    };
                    // Sherman-Morrison for the rank-one penalty term.
                    for i in 0..len {
                        d[i] = -g[i];
                    }
                    chol.solve(&mut d);
                    if obj.mu > 0.0 {
                        w.copy_from_slice(&gw);
                        chol.solve(&mut w);
                        let coef = obj.mu * linalg::dot(&gw, &d) / (1.0 + obj.mu * linalg::dot(&gw, &w));
                        for i in 0..len {
                            d[i] -= coef * w[i];
                        }
                    }
                    let slope = linalg::dot(&g, &d);
                    if !(slope < 0.0) {
                        shift = (shift * 10.0).max(floor);
                        continue;
                    }
                    if let Some(found) = line_search(obj, z, &d, slope, terms.value, 1.0, 12, &mut trial) {
                        accepted = Some(found);
                        shift = if shift <= floor { 0.0 } else { shift / 10.0 };
                        break;
                    }
                    if -slope <= 1e-14 * (1.0 + terms.value.abs()) {
                        break;
                    }
                    shift = (shift * 10.0).max(floor * 1e4);
                }
            }
            InnerMethod::GradientDescent => {
                for i in 0..len {
                    d[i] = -g[i];
                }
                let slope = -gnorm * gnorm;
                if let Some((value, t)) = line_search(obj, z, &d, slope, terms.value, step, 60, &mut trial) {
                    accepted = Some((value, t));
                    step = 2.0 * t;
                }
            }
        }
        match accepted {
            Some((_, _)) => {
                z.copy_from_slice(&trial);
                terms = obj.gradients(z, &mut gr, &mut gw, &mut g);
                iterations += 1;
                if let Some(t) = trace.as_deref_mut() {
                    t.push(terms.value);
                }
            }
            None => {
                // No representable decrease remains along the search
                // direction: stationary to working precision.
                let slope = -linalg::dot(&g, &d).abs();
                converged = -slope <= 1e-13 * (1.0 + terms.value.abs()) || gnorm <= 1e3 * tol;
                break;
            }
        }
    }
    InnerOutcome {
        terms,
        converged,
        work_grad_norm: linalg::norm(&gw),
    }
}

/// Backtracking Armijo search from step `t0`; on success `trial` holds the
/// accepted point.
#[allow(clippy::too_many_arguments)]
fn line_search(
    obj: &LoopObjective<'_>,
    z: &[f64],
    d: &[f64],
    slope: f64,
    value: f64,
    t0: f64,
    max_halvings: usize,
    trial: &mut [f64],
) -> Option<(f64, f64)> {
    let mut t = t0;
    for _ in 0..max_halvings {
        for i in 0..z.len() {
            trial[i] = z[i] + t * d[i];
        }
        let v = obj.terms(trial).value;
        if v.is_finite() && v <= value + ARMIJO * t * slope && v <= value {
            return Some((v, t));
        }
        t *= 0.5;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiffusionModel;

    fn circle(r: f64, nodes: usize) -> Vec<f64> {
        (0..nodes)
            .flat_map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / nodes as f64;
                [r * t.cos() + 0.1 * (3.0 * t).sin(), r * t.sin()]
            })
            .collect()
    }

    #[test]
    fn newton_collapses_loop_to_fixed_point() {
        let model = DiffusionModel::rotational_ou(1.0);
        let obj = LoopObjective::new(&model, 32, 5.0);
        let mut z = circle(0.5, 32);
        let mut trace = Vec::new();
        let out = minimize(&obj, &mut z, InnerMethod::Newton, 1e-12, 50, Some(&mut trace));
        assert!(out.converged);
        assert!(out.terms.rate < 1e-20);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gradient_descent_decreases_monotonically() {
        let model = DiffusionModel::rotational_ou(1.0);
        let obj = LoopObjective::new(&model, 16, 5.0);
        let mut z = circle(0.5, 16);
        let mut trace = Vec::new();
        let start = obj.terms(&z).value;
        let out = minimize(&obj, &mut z, InnerMethod::GradientDescent, 1e-12, 300, Some(&mut trace));
        assert!(out.terms.value < 1e-3 * start);
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn constrained_newton_step_matches_penalized_minimum() {
        // With μ > 0 and fixed λ the solver must handle the rank-one term.
        let model = DiffusionModel::rotational_ou(1.0);
        let mut obj = LoopObjective::new(&model, 32, 2.0 * std::f64::consts::PI / 2f64.sqrt());
        obj.q = 1.0;
        obj.mu = 100.0;
        obj.lambda = (2f64.sqrt() - 1.0) / 2.0;
        let mut z = circle(0.8, 32);
        let out = minimize(&obj, &mut z, InnerMethod::Newton, 1e-11, 100, None);
        assert!(out.converged, "{out:?}");
        assert!((out.terms.work - 1.0).abs() < 1e-6, "{out:?}");
    }
}
