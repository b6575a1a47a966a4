//! Property suites over the model catalog, paths, action and estimators.

mod common;

use common::{catalog, knots, mollified_loop, rng};
use fwlab::action::{fw_action, rate_i, reversal_gap};
use fwlab::linalg::MAT;
use fwlab::montecarlo::wilson_interval;
use fwlab::optimize::{biconjugate, conjugate};
use fwlab::paths::{translate, DiscretePath, HolonomicMeasure, TimeGrid};
use proptest::prelude::*;

fn point(dim: usize, raw: &[f64]) -> Vec<f64> {
    raw[..dim].to_vec()
}

fn rel(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / scale.max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn drift_decomposes(raw in prop::collection::vec(-3.0f64..3.0, 3)) {
        for model in catalog() {
            let n = model.dim();
            let x = point(n, &raw);
            let b = model.drift(&x).unwrap();
            let mut a = [0.0; MAT];
            let mut g = [0.0; 3];
            let mut c = [0.0; 3];
            model.diffusion().value(&x, &mut a);
            model.potential().gradient(&x, &mut g);
            model.circulation().value(&x, &mut c);
            for i in 0..n {
                let agrad: f64 = (0..n).map(|j| a[i * n + j] * g[j]).sum();
                prop_assert!((b[i] + agrad - c[i]).abs() <= 1e-12 * (1.0 + b[i].abs()));
            }
        }
    }

    #[test]
    fn noise_factor_recomposes(raw in prop::collection::vec(-3.0f64..3.0, 3)) {
        for model in catalog() {
            let n = model.dim();
            let x = point(n, &raw);
            let s = model.noise_factor(&x).unwrap();
            let mut a = [0.0; MAT];
            model.diffusion().value(&x, &mut a);
            let norm = a[..n * n].iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..n {
                for j in 0..n {
                    let sst: f64 = (0..n).map(|k| s[i * n + k] * s[j * n + k]).sum();
                    prop_assert!((sst - a[i * n + j]).abs() <= 1e-12 * norm);
                }
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_differences(raw in prop::collection::vec(-2.0f64..2.0, 3)) {
        let h = 1e-5;
        for model in catalog() {
            let n = model.dim();
            let x = point(n, &raw);
            let mut grad = [0.0; 3];
            let mut hess = [0.0; MAT];
            let mut jac = [0.0; MAT];
            model.potential().gradient(&x, &mut grad);
            model.potential().hessian(&x, &mut hess);
            model.circulation().jacobian(&x, &mut jac);
            let scale_g = grad[..n].iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let scale_h = hess[..n * n].iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let scale_j = jac[..n * n].iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for k in 0..n {
                let mut up = x.clone();
                let mut down = x.clone();
                up[k] += h;
                down[k] -= h;
                let dv = (model.potential().value(&up) - model.potential().value(&down)) / (2.0 * h);
                prop_assert!(rel(grad[k], dv, scale_g) <= 1e-6, "gradient of {}", model.family());
                let (mut gu, mut gd) = ([0.0; 3], [0.0; 3]);
                model.potential().gradient(&up, &mut gu);
                model.potential().gradient(&down, &mut gd);
                let (mut cu, mut cd) = ([0.0; 3], [0.0; 3]);
                model.circulation().value(&up, &mut cu);
                model.circulation().value(&down, &mut cd);
                for i in 0..n {
                    prop_assert!(rel(hess[i * n + k], (gu[i] - gd[i]) / (2.0 * h), scale_h) <= 1e-6);
                    prop_assert!(rel(jac[i * n + k], (cu[i] - cd[i]) / (2.0 * h), scale_j) <= 1e-6);
                }
                let (mut au, mut ad, mut pa) = ([0.0; MAT], [0.0; MAT], [0.0; MAT]);
                model.diffusion().value(&up, &mut au);
                model.diffusion().value(&down, &mut ad);
                model.diffusion().partial(&x, k, &mut pa);
                let scale_a = pa[..n * n].iter().fold(1.0f64, |m, v| m.max(v.abs()));
                for i in 0..n * n {
                    prop_assert!(rel(pa[i], (au[i] - ad[i]) / (2.0 * h), scale_a) <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn action_is_nonnegative(nodes in prop::collection::vec(-3.0f64..3.0, 42), horizon in 0.1f64..5.0) {
        for model in catalog() {
            let n = model.dim();
            let steps = nodes.len() / n - 1;
            let grid = TimeGrid::new(horizon, steps).unwrap();
            let p = DiscretePath::new(grid, n, nodes[..(steps + 1) * n].to_vec()).unwrap();
            prop_assert!(fw_action(&model, &p).total >= 0.0);
        }
    }

    #[test]
    fn rate_is_translation_invariant_and_reversal_identity_holds(seed in 0u64..1000, shift in 0usize..64) {
        let mut r = rng(seed);
        for model in catalog() {
            let p = mollified_loop(&knots(&mut r, model.dim(), 5), 3.0, 64);
            let q = translate(&p, shift as f64 * p.dt());
            let (a, b) = (rate_i(&model, &HolonomicMeasure::new(p.clone())), rate_i(&model, &HolonomicMeasure::new(q)));
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            let (gap, w) = reversal_gap(&model, &HolonomicMeasure::new(p));
            // Exact up to the midpoint quadrature of ∮∇V·dx.
            prop_assert!((gap - w).abs() <= 1e-2);
        }
    }

    #[test]
    fn wilson_interval_is_ordered(m in 1usize..100_000, frac in 0.0f64..1.0) {
        let hits = ((m as f64) * frac) as usize;
        let (lo, hi) = wilson_interval(hits, m);
        let p = hits as f64 / m as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-15 && p <= hi + 1e-15 && hi <= 1.0);
    }

    #[test]
    fn biconjugate_is_the_convex_minorant(s in prop::collection::vec(0.0f64..2.0, 12)) {
        let q: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.5).collect();
        let hull = biconjugate(&q, &s);
        for (h, v) in hull.iter().zip(&s) {
            prop_assert!(*h <= v + 1e-12);
        }
        let again = biconjugate(&q, &hull);
        for (a, b) in hull.iter().zip(&again) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        let lam: Vec<f64> = (0..9).map(|i| i as f64 * 0.5 - 2.0).collect();
        let conj = conjugate(&q, &s, &lam);
        for w in conj.windows(3) {
            prop_assert!(w[1] <= 0.5 * (w[0] + w[2]) + 1e-12);
        }
    }
}
