//! The discrete per-unit-time action and work on a loop of `N` free nodes,
//! with analytic gradients and segment-wise Hessians.

use crate::linalg::{MAT, MAX_DIM};
use crate::model::DiffusionModel;

pub(crate) const SEG: usize = 2 * MAX_DIM;

/// Value and `(z_k, z_{k+1})`-gradients of the segment integrands
/// `φ = rᵀa⁻¹(m)r` and `ψ = f(m)·(z_{k+1} - z_k)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct SegmentEval {
    pub phi: f64,
    pub psi: f64,
    pub dphi: [f64; SEG],
    pub dpsi: [f64; SEG],
}

pub(crate) fn segment(model: &DiffusionModel, x0: &[f64], x1: &[f64], dt: f64) -> SegmentEval {
    let n = model.dim();
    let mut m = [0.0; MAX_DIM];
    let mut h = [0.0; MAX_DIM];
    for i in 0..n {
        m[i] = 0.5 * (x0[i] + x1[i]);
        h[i] = x1[i] - x0[i];
    }
    let m = &m[..n];
    let mut b = [0.0; MAX_DIM];
    let mut db = [0.0; MAT];
    let mut g = [0.0; MAT];
    model.drift_into(m, &mut b);
    model.drift_jacobian_into(m, &mut db);
    model
        .inverse_diffusion_into(m, &mut g)
        .expect("diffusion matrix lost positive definiteness");
    let mut r = [0.0; MAX_DIM];
    for i in 0..n {
        r[i] = h[i] / dt - b[i];
    }
    let mut u = [0.0; MAX_DIM];
    for i in 0..n {
        u[i] = (0..n).map(|j| g[i * n + j] * r[j]).sum();
    }
    let phi: f64 = (0..n).map(|i| r[i] * u[i]).sum();

    // Db^T u and the metric term u^T (∂_j a) u.
    let mut dbu = [0.0; MAX_DIM];
    let mut qa = [0.0; MAX_DIM];
    for j in 0..n {
        dbu[j] = (0..n).map(|i| db[i * n + j] * u[i]).sum();
    }
    if !model.has_constant_diffusion() {
        let mut da = [0.0; MAT];
        for j in 0..n {
            model.diffusion().partial(m, j, &mut da);
            qa[j] = (0..n)
                .map(|i| u[i] * (0..n).map(|l| da[i * n + l] * u[l]).sum::<f64>())
                .sum();
        }
    }
    let mut dphi = [0.0; SEG];
    for j in 0..n {
        let common = -dbu[j] - 0.5 * qa[j];
        dphi[j] = -2.0 * u[j] / dt + common;
        dphi[n + j] = 2.0 * u[j] / dt + common;
    }

    let mut f = [0.0; MAX_DIM];
    let mut df = [0.0; MAT];
    model.work_field_into(m, &mut f);
    model.work_field_jacobian_into(m, &mut df);
    let psi: f64 = (0..n).map(|i| f[i] * h[i]).sum();
    let mut dpsi = [0.0; SEG];
    for j in 0..n {
        let half: f64 = 0.5 * (0..n).map(|i| df[i * n + j] * h[i]).sum::<f64>();
        dpsi[j] = -f[j] + half;
        dpsi[n + j] = f[j] + half;
    }
    SegmentEval { phi, psi, dphi, dpsi }
}

/// Soft confinement `κ (1/N) Σ ((|z - x_c|² - R²)₊)²`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Cap {
    pub center: Vec<f64>,
    pub radius: f64,
    pub weight: f64,
}

/// `L(z) = R(z) - λ(W(z) - q) + (μ/2)(W(z) - q)² + cap(z)` on loops of
/// `N` nodes with period `S`.
#[derive(Clone, Debug)]
pub(crate) struct LoopObjective<'a> {
    pub model: &'a DiffusionModel,
    pub nodes: usize,
    pub period: f64,
    pub lambda: f64,
    pub mu: f64,
    pub q: f64,
    pub cap: Option<Cap>,
}

/// Rate, work and the combined value at one loop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Terms {
    pub rate: f64,
    pub work: f64,
    pub cap: f64,
    pub value: f64,
}

impl<'a> LoopObjective<'a> {
    pub fn new(model: &'a DiffusionModel, nodes: usize, period: f64) -> Self {
        LoopObjective {
            model,
            nodes,
            period,
            lambda: 0.0,
            mu: 0.0,
            q: 0.0,
            cap: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn len(&self) -> usize {
        self.nodes * self.dim()
    }

    fn dt(&self) -> f64 {
        self.period / self.nodes as f64
    }

    fn node<'z>(&self, z: &'z [f64], k: usize) -> &'z [f64] {
        let n = self.dim();
        let k = k % self.nodes;
        &z[k * n..(k + 1) * n]
    }

    fn combine(&self, rate: f64, work: f64, cap: f64) -> Terms {
        let c = work - self.q;
        Terms {
            rate,
            work,
            cap,
            value: rate - self.lambda * c + 0.5 * self.mu * c * c + cap,
        }
    }

    fn cap_value(&self, z: &[f64]) -> f64 {
        let Some(cap) = &self.cap else { return 0.0 };
        let n = self.dim();
        let sum: f64 = (0..self.nodes)
            .map(|k| {
                let x = self.node(z, k);
                let rho: f64 = (0..n).map(|i| (x[i] - cap.center[i]).powi(2)).sum();
                (rho - cap.radius * cap.radius).max(0.0).powi(2)
            })
            .sum();
        cap.weight * sum / self.nodes as f64
    }

    pub fn terms(&self, z: &[f64]) -> Terms {
        let dt = self.dt();
        let (mut phi, mut psi) = (0.0, 0.0);
        for k in 0..self.nodes {
            let s = crate::action::segment_integrand(self.model, self.node(z, k), self.node(z, k + 1), dt);
            phi += s;
            psi += work_increment(self.model, self.node(z, k), self.node(z, k + 1));
        }
        self.combine(phi / (4.0 * self.nodes as f64), psi / self.period, self.cap_value(z))
    }

    /// Terms plus gradients of the rate, the work and the full objective.
    pub fn gradients(&self, z: &[f64], g_rate: &mut [f64], g_work: &mut [f64], g: &mut [f64]) -> Terms {
        let n = self.dim();
        let dt = self.dt();
        let big_n = self.nodes as f64;
        g_rate.iter_mut().for_each(|v| *v = 0.0);
        g_work.iter_mut().for_each(|v| *v = 0.0);
        let (mut phi, mut psi) = (0.0, 0.0);
        for k in 0..self.nodes {
            let s = segment(self.model, self.node(z, k), self.node(z, k + 1), dt);
            phi += s.phi;
            psi += s.psi;
            let k1 = (k + 1) % self.nodes;
            for j in 0..n {
                g_rate[k * n + j] += s.dphi[j] / (4.0 * big_n);
                g_rate[k1 * n + j] += s.dphi[n + j] / (4.0 * big_n);
                g_work[k * n + j] += s.dpsi[j] / self.period;
                g_work[k1 * n + j] += s.dpsi[n + j] / self.period;
            }
        }
        let terms = self.combine(phi / (4.0 * big_n), psi / self.period, self.cap_value(z));
        let kappa = self.lambda - self.mu * (terms.work - self.q);
        for i in 0..g.len() {
            g[i] = g_rate[i] - kappa * g_work[i];
        }
        if let Some(cap) = &self.cap {
            for k in 0..self.nodes {
                let x = self.node(z, k);
                let rho: f64 = (0..n).map(|i| (x[i] - cap.center[i]).powi(2)).sum();
                let excess = (rho - cap.radius * cap.radius).max(0.0);
                for i in 0..n {
                    g[k * n + i] += 4.0 * cap.weight / big_n * excess * (x[i] - cap.center[i]);
                }
            }
        }
        terms
    }

    /// Block-tridiagonal part of the Hessian: everything except the
    /// rank-one `μ ∇W ∇Wᵀ` term. `diag[k]` is the `(k,k)` block and
    /// `sub[k]` the `(k+1 mod N, k)` block.
    pub fn hessian_blocks(&self, z: &[f64], work: f64, diag: &mut [[f64; MAT]], sub: &mut [[f64; MAT]]) {
        let n = self.dim();
        let dt = self.dt();
        let big_n = self.nodes as f64;
        let kappa = self.lambda - self.mu * (work - self.q);
        for d in diag.iter_mut() {
            *d = [0.0; MAT];
        }
        let seg_grad = |x: &[f64; SEG], out: &mut [f64; SEG]| {
            let s = segment(self.model, &x[..n], &x[n..2 * n], dt);
            for i in 0..2 * n {
                out[i] = s.dphi[i] / (4.0 * big_n) - kappa * s.dpsi[i] / self.period;
            }
        };
        let m = 2 * n;
        let mut x = [0.0; SEG];
        let mut gp = [0.0; SEG];
        let mut gm = [0.0; SEG];
        let mut hseg = [0.0; SEG * SEG];
        for k in 0..self.nodes {
            x[..n].copy_from_slice(self.node(z, k));
            x[n..m].copy_from_slice(self.node(z, k + 1));
            for c in 0..m {
                let h = 1e-5 * x[c].abs().max(1.0);
                let orig = x[c];
                x[c] = orig + h;
                seg_grad(&x, &mut gp);
                x[c] = orig - h;
                seg_grad(&x, &mut gm);
                x[c] = orig;
                for r in 0..m {
                    hseg[r * m + c] = (gp[r] - gm[r]) / (2.0 * h);
                }
            }
            for r in 0..m {
                for c in 0..r {
                    let avg = 0.5 * (hseg[r * m + c] + hseg[c * m + r]);
                    hseg[r * m + c] = avg;
                    hseg[c * m + r] = avg;
                }
            }
            let k1 = (k + 1) % self.nodes;
            for r in 0..n {
                for c in 0..n {
                    diag[k][r * n + c] += hseg[r * m + c];
                    diag[k1][r * n + c] += hseg[(n + r) * m + n + c];
                    sub[k][r * n + c] = hseg[(n + r) * m + c];
                }
            }
        }
        if let Some(cap) = &self.cap {
            for k in 0..self.nodes {
                let x = self.node(z, k);
                let rho: f64 = (0..n).map(|i| (x[i] - cap.center[i]).powi(2)).sum();
                let excess = rho - cap.radius * cap.radius;
                if excess <= 0.0 {
                    continue;
                }
                let w = 4.0 * cap.weight / big_n;
                for r in 0..n {
                    diag[k][r * n + r] += w * excess;
                    for c in 0..n {
                        diag[k][r * n + c] += 2.0 * w * (x[r] - cap.center[r]) * (x[c] - cap.center[c]);
                    }
                }
            }
        }
    }
}

fn work_increment(model: &DiffusionModel, x0: &[f64], x1: &[f64]) -> f64 {
    let n = model.dim();
    let mut m = [0.0; MAX_DIM];
    let mut f = [0.0; MAX_DIM];
    for i in 0..n {
        m[i] = 0.5 * (x0[i] + x1[i]);
    }
    model.work_field_into(&m[..n], &mut f);
    (0..n).map(|i| f[i] * (x1[i] - x0[i])).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn models() -> Vec<DiffusionModel> {
        vec![
            DiffusionModel::rotational_ou(1.0),
            DiffusionModel::bounded_rotation(0.7),
            DiffusionModel::from_spec(&ModelSpec::AnisotropicOu {
                diffusion: vec![vec![1.0, 0.3], vec![0.3, 0.6]],
                stiffness: vec![vec![2.0, 0.1], vec![0.1, 1.0]],
                circulation: vec![vec![0.1, 0.8], vec![-0.5, 0.0]],
                modulation: 0.4,
            })
            .unwrap(),
        ]
    }

    fn wobbly_loop(n: usize, nodes: usize, seed: f64) -> Vec<f64> {
        (0..nodes)
            .flat_map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / nodes as f64;
                (0..n).map(move |i| 0.6 * (t + i as f64 * 1.3 + seed).cos() + 0.2 * (3.0 * t + seed * i as f64).sin())
            })
            .collect()
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        for model in models() {
            let n = model.dim();
            let mut obj = LoopObjective::new(&model, 16, 3.7);
            obj.lambda = 0.3;
            obj.mu = 2.0;
            obj.q = 0.1;
            obj.cap = Some(Cap {
                center: vec![0.0; n],
                radius: 0.5,
                weight: 3.0,
            });
            let z = wobbly_loop(n, 16, 0.4);
            let len = obj.len();
            let (mut gr, mut gw, mut g) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
            obj.gradients(&z, &mut gr, &mut gw, &mut g);
            for i in 0..len {
                let h = 1e-6;
                let mut zp = z.clone();
                zp[i] += h;
                let mut zm = z.clone();
                zm[i] -= h;
                let fd = (obj.terms(&zp).value - obj.terms(&zm).value) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{} {i}: {fd} vs {}", model.family(), g[i]);
            }
        }
    }

    #[test]
    fn hessian_blocks_match_gradient_differences() {
        for model in models() {
            let n = model.dim();
            let mut obj = LoopObjective::new(&model, 16, 2.9);
            obj.lambda = -0.4;
            obj.mu = 0.0;
            let z = wobbly_loop(n, 16, 1.1);
            let len = obj.len();
            let mut diag = vec![[0.0; MAT]; 16];
            let mut sub = vec![[0.0; MAT]; 16];
            let work = obj.terms(&z).work;
            obj.hessian_blocks(&z, work, &mut diag, &mut sub);
            let grad = |z: &[f64]| {
                let (mut gr, mut gw, mut g) = (vec![0.0; len], vec![0.0; len], vec![0.0; len]);
                obj.gradients(z, &mut gr, &mut gw, &mut g);
                g
            };
            let col = 5 * n;
            let h = 1e-6;
            let mut zp = z.clone();
            zp[col] += h;
            let mut zm = z.clone();
            zm[col] -= h;
            let (gp, gm) = (grad(&zp), grad(&zm));
            let fd: Vec<f64> = (0..len).map(|i| (gp[i] - gm[i]) / (2.0 * h)).collect();
            for r in 0..n {
                assert!((fd[5 * n + r] - diag[5][r * n]).abs() < 1e-5);
                assert!((fd[6 * n + r] - sub[5][r * n]).abs() < 1e-5);
                assert!((fd[4 * n + r] - sub[4][r]).abs() < 1e-5);
            }
        }
    }
}
