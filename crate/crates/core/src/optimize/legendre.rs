//! Convex conjugates of sampled rate curves, the dual-scan route to `s`,
//! and the fluctuation-theorem defect.

use rayon::prelude::*;

use super::rate::{dual_value, DualPoint, OptimizerConfig, RateCurve};
use crate::error::{Error, Result};
use crate::model::DiffusionModel;

/// `Λ(λ) = max_i [λ q_i - s_i]` for each `λ`.
pub fn conjugate(q: &[f64], s: &[f64], lambdas: &[f64]) -> Vec<f64> {
    lambdas
        .iter()
        .map(|&l| {
            q.iter()
                .zip(s)
                .filter(|(_, s)| s.is_finite())
                .map(|(q, s)| l * q - s)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Legendre transform of a sampled curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Legendre {
    pub lambda: Vec<f64>,
    pub value: Vec<f64>,
    /// Whether the input samples were convex (within `1e-9`).
    pub convex: bool,
}

/// Chord slopes of the lower convex hull of `(q_i, s_i)`; `q` ascending.
pub fn hull_slopes(q: &[f64], s: &[f64]) -> Vec<f64> {
    let mut hull: Vec<usize> = Vec::new();
    for i in (0..q.len()).filter(|&i| s[i].is_finite()) {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            let cross = (q[b] - q[a]) * (s[i] - s[a]) - (s[b] - s[a]) * (q[i] - q[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull.windows(2).map(|w| (s[w[1]] - s[w[0]]) / (q[w[1]] - q[w[0]])).collect()
}

/// `Λ` at the hull slopes, which carry all of the conjugate's kinks.
pub fn legendre(curve: &RateCurve) -> Result<Legendre> {
    if curve.q.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("q grid must be strictly increasing"));
    }
    let slopes = hull_slopes(&curve.q, &curve.s);
    let convex = super::rate::convexity_violations(&curve.q, &curve.s, 1e-9).is_empty();
    let value = conjugate(&curve.q, &curve.s, &slopes);
    Ok(Legendre {
        lambda: slopes,
        value,
        convex,
    })
}

/// `s**(q_i) = max_λ [λ q_i - Λ(λ)]` over the hull slopes: the convex
/// minorant of the samples evaluated on the grid.
pub fn biconjugate(q: &[f64], s: &[f64]) -> Vec<f64> {
    let slopes = hull_slopes(q, s);
    if slopes.is_empty() {
        return s.to_vec();
    }
    let lam = conjugate(q, s, &slopes);
    q.iter()
        .map(|&x| {
            slopes
                .iter()
                .zip(&lam)
                .map(|(l, v)| l * x - v)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// `max over q of |s(-q) - s(q) - q|`; the grid must be symmetric.
pub fn ft_defect(curve: &RateCurve) -> Result<f64> {
    let tol = 1e-12;
    let mut defect: f64 = 0.0;
    for (i, &q) in curve.q.iter().enumerate() {
        let j = curve
            .q
            .iter()
            .position(|&p| (p + q).abs() <= tol * q.abs().max(1.0))
            .ok_or_else(|| Error::invalid(format!("q grid is not symmetric: -{q} missing")))?;
        let d = (curve.s[j] - curve.s[i] - q).abs();
        defect = defect.max(if d.is_nan() { f64::INFINITY } else { d });
    }
    Ok(defect)
}

/// Result of the dual scan.
#[derive(Clone, Debug)]
pub struct DualScan {
    pub lambda: Vec<f64>,
    /// `Λ(λ)` on the coarse grid.
    pub scgf: Vec<f64>,
    pub q: Vec<f64>,
    /// `s(q) = sup_λ [λq - Λ(λ)]`, refined between grid points.
    pub s: Vec<f64>,
    /// Maximizing `λ` per `q`.
    pub argmax: Vec<f64>,
}

/// Computes `Λ` on the configured `λ` grid by unconstrained minimization of
/// `ℐ - λW`, then transforms back to `s` on `qs`. Each supremum is refined
/// by bisection on the slope `q - W(λ)` of the concave `λq - Λ(λ)` inside
/// the grid cell pair around the coarse maximum.
pub fn dual_scan(model: &DiffusionModel, qs: &[f64], cfg: &OptimizerConfig) -> Result<DualScan> {
    cfg.validate()?;
    let lambdas = cfg.lambda_grid.values();
    let grid: Vec<DualPoint> = lambdas
        .par_iter()
        .map(|&l| dual_value(model, l, cfg))
        .collect::<Result<_>>()?;
    let scgf: Vec<f64> = grid.iter().map(|p| p.scgf).collect();
    let mut cache: Vec<(f64, f64, f64)> = grid.iter().map(|p| (p.lambda, p.scgf, p.work)).collect();
    let mut eval = |l: f64| -> Result<(f64, f64)> {
        if let Some(&(_, v, w)) = cache.iter().find(|c| c.0 == l) {
            return Ok((v, w));
        }
        let p = dual_value(model, l, cfg)?;
        cache.push((l, p.scgf, p.work));
        Ok((p.scgf, p.work))
    };
    let mut s = Vec::with_capacity(qs.len());
    let mut argmax = Vec::with_capacity(qs.len());
    for &q in qs {
        let objective: Vec<f64> = lambdas.iter().zip(&scgf).map(|(l, v)| l * q - v).collect();
        let mut k = 0;
        for i in 1..objective.len() {
            if objective[i] > objective[k] {
                k = i;
            }
        }
        let (mut best, mut arg) = (objective[k], lambdas[k]);
        let mut lo = lambdas[k.saturating_sub(1)];
        let mut hi = lambdas[(k + 1).min(lambdas.len() - 1)];
        while hi - lo > cfg.dual.lambda_tol {
            let mid = 0.5 * (lo + hi);
            let (v, w) = eval(mid)?;
            if mid * q - v > best {
                best = mid * q - v;
                arg = mid;
            }
            if q > w {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        s.push(best);
        argmax.push(arg);
    }
    Ok(DualScan {
        lambda: lambdas,
        scgf,
        q: qs.to_vec(),
        s,
        argmax,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_branch(q: f64) -> f64 {
        let root = 2f64.sqrt();
        if q >= 0.0 {
            q * (root - 1.0) / 2.0
        } else {
            -q * (root + 1.0) / 2.0
        }
    }

    #[test]
    fn conjugate_of_absolute_value() {
        let q: Vec<f64> = (-20..=20).map(|i| i as f64 / 10.0).collect();
        let s: Vec<f64> = q.iter().map(|q: &f64| q.abs()).collect();
        let lam = conjugate(&q, &s, &[-1.0, -0.3, 0.0, 0.5, 1.0, 1.5, -3.0]);
        assert_eq!(&lam[..5], &[0.0; 5]);
        assert!((lam[5] - 1.0).abs() < 1e-12);
        assert!((lam[6] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn two_branch_curve_has_flat_conjugate() {
        let q = [-1.0, -0.5, -0.25, 0.0, 0.25, 0.5, 1.0];
        let s: Vec<f64> = q.iter().map(|&q| two_branch(q)).collect();
        let root = 2f64.sqrt();
        let lam = conjugate(&q, &s, &[-(root + 1.0) / 2.0, 0.0, (root - 1.0) / 2.0, 0.5]);
        assert!(lam[0].abs() < 1e-12 && lam[1].abs() < 1e-12 && lam[2].abs() < 1e-12);
        assert!(lam[3] > 0.0);
        let curve = RateCurve::new(q.to_vec(), s.clone()).unwrap();
        assert!(ft_defect(&curve).unwrap() < 1e-15);
        let leg = legendre(&curve).unwrap();
        assert!(leg.convex);
    }

    #[test]
    fn biconjugate_reproduces_convex_samples() {
        let q: Vec<f64> = (0..40).map(|i| -2.0 + 0.1 * i as f64 + 0.01 * (i as f64).sin()).collect();
        let s: Vec<f64> = q.iter().map(|x| (x * x + 0.3).sqrt() + 0.2 * x).collect();
        let back = biconjugate(&q, &s);
        for (a, b) in s.iter().zip(&back) {
            assert!((a - b).abs() <= 1e-9);
        }
        let bumpy: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + if i == 20 { 0.1 } else { 0.0 }).collect();
        let hull = biconjugate(&q, &bumpy);
        assert!(hull[20] < bumpy[20]);
        let curve = RateCurve::new(q.clone(), bumpy).unwrap();
        assert!(!legendre(&curve).unwrap().convex);
        assert_eq!(curve.convexity_violations, vec![20]);
    }

    #[test]
    fn dual_scan_recovers_both_branches() {
        let model = DiffusionModel::rotational_ou(1.0);
        let mut cfg = OptimizerConfig::default().with_nodes(64);
        cfg.lambda_grid = super::super::LambdaGrid {
            min: -1.5,
            max: 0.5,
            count: 9,
        };
        let scan = dual_scan(&model, &[-0.5, 0.5], &cfg).unwrap();
        for (q, s) in scan.q.iter().zip(&scan.s) {
            let exact = two_branch(*q);
            assert!((s - exact).abs() <= 1e-3 * exact, "q={q}: {s} vs {exact}");
        }
        let root = 2f64.sqrt();
        assert!((scan.argmax[0] + (root + 1.0) / 2.0).abs() < 1e-4);
        assert!((scan.argmax[1] - (root - 1.0) / 2.0).abs() < 1e-4);
    }

    #[test]
    fn defect_needs_symmetric_grid() {
        let curve = RateCurve::new(vec![0.0], vec![0.0]).unwrap();
        assert_eq!(ft_defect(&curve).unwrap(), 0.0);
        let skew = RateCurve::new(vec![-1.0, 0.5], vec![1.0, 0.2]).unwrap();
        assert!(matches!(ft_defect(&skew), Err(Error::InvalidArgument(_))));
    }
}
