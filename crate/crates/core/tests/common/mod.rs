#![allow(dead_code)]

use fwlab::model::{DiffusionModel, ModelSpec};
use fwlab::paths::{mollify_periodic, PeriodicPath};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ROOT2: f64 = std::f64::consts::SQRT_2;

/// Circular-orbit rate for rotational OU with γ = 1.
pub fn circular_rate(q: f64) -> f64 {
    if q >= 0.0 {
        q * (ROOT2 - 1.0) / 2.0
    } else {
        -q * (ROOT2 + 1.0) / 2.0
    }
}

pub fn anisotropic() -> DiffusionModel {
    DiffusionModel::from_spec(&ModelSpec::AnisotropicOu {
        diffusion: vec![vec![1.0, 0.3], vec![0.3, 0.8]],
        stiffness: vec![vec![1.5, 0.2], vec![0.2, 0.7]],
        circulation: vec![vec![0.0, -0.8], vec![0.6, 0.0]],
        modulation: 0.5,
    })
    .unwrap()
}

/// One model per catalog family.
pub fn catalog() -> Vec<DiffusionModel> {
    vec![
        DiffusionModel::rotational_ou(1.0),
        DiffusionModel::bounded_rotation(1.5),
        DiffusionModel::double_well(0.5),
        anisotropic(),
    ]
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random knots of a piecewise-linear loop.
pub fn knots(rng: &mut ChaCha8Rng, dim: usize, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect()).collect()
}

/// The loop through `knots` sampled on `steps` nodes over `period`, then
/// mollified with width `period / 5`.
pub fn mollified_loop(knots: &[Vec<f64>], period: f64, steps: usize) -> PeriodicPath {
    let k = knots.len();
    let dim = knots[0].len();
    let raw = PeriodicPath::from_fn(period, steps, dim, |t| {
        let u = (t / period).rem_euclid(1.0) * k as f64;
        let i = (u.floor() as usize).min(k - 1);
        let w = u - i as f64;
        (0..dim).map(|j| (1.0 - w) * knots[i][j] + w * knots[(i + 1) % k][j]).collect()
    })
    .unwrap();
    mollify_periodic(&raw, period / 5.0).unwrap().0
}
