//! Independent oracles checked against closed forms and brute force.

mod common;

use common::{circular_rate, ROOT2};
use fwlab::action::{fw_action, gc_observable};
use fwlab::model::DiffusionModel;
use fwlab::paths::PeriodicPath;

/// Rate and work per unit time of the circle of radius `r` run at angular
/// velocity `ω` under rotational OU with γ = 1.
fn circle_terms(r: f64, omega: f64) -> (f64, f64) {
    let rate = 0.25 * r * r * (1.0 + (omega - 1.0).powi(2));
    (rate, r * r * omega)
}

#[test]
fn brute_force_circle_search_matches_closed_form() {
    for &q in &[-1.0f64, -0.5, -0.25, 0.25, 0.5, 1.0] {
        let mut best = f64::INFINITY;
        let mut arg = (0.0f64, 0.0f64);
        for i in 1..=2000 {
            let r = 2.0 * i as f64 / 2000.0;
            for j in 1..=2000 {
                let omega = q.signum() * 4.0 * j as f64 / 2000.0;
                // Both terms scale as r², so every grid point is projected
                // onto the constraint W = q by rescaling r.
                let (_, w) = circle_terms(r, omega);
                let r = r * (q / w).sqrt();
                let (rate, w) = circle_terms(r, omega);
                assert!((w - q).abs() <= 1e-12);
                if rate < best {
                    best = rate;
                    arg = (r, omega);
                }
            }
        }
        let exact = circular_rate(q);
        assert!((best - exact).abs() <= 1e-3 * exact, "q={q}: grid {best} vs {exact}");
        assert!((arg.1.abs() - ROOT2).abs() < 0.02, "q={q}: ω={} r={}", arg.1, arg.0);
    }
}

#[test]
fn discrete_circle_matches_continuous_terms() {
    let model = DiffusionModel::rotational_ou(1.0);
    for &(r, omega) in &[(0.6, ROOT2), (0.4, -ROOT2), (1.0, 0.5)] {
        let period = 2.0 * std::f64::consts::PI / omega.abs();
        let p = PeriodicPath::from_fn(period, 2048, 2, |t| vec![r * (omega * t).cos(), r * (omega * t).sin()]).unwrap();
        let (rate, w) = circle_terms(r, omega);
        let got = fw_action(&model, p.as_path()).per_unit_time;
        let work = gc_observable(&model, p.as_path(), 0.0).stratonovich;
        assert!((got - rate).abs() < 1e-5 * rate.max(1e-3), "{got} vs {rate}");
        assert!((work - w).abs() < 1e-5 * w.abs(), "{work} vs {w}");
    }
}

#[test]
fn circular_rate_satisfies_fluctuation_identity() {
    for q in [0.1, 0.25, 0.7, 2.0] {
        assert!((circular_rate(-q) - circular_rate(q) - q).abs() < 1e-15);
    }
}
