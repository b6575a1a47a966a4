//! Parametric diffusion models with drift `b = -a ∇V + c`.
//!
//! A [`DiffusionModel`] bundles three analytic fields, each with its
//! derivatives: a scalar potential `V`, a circulation field `c` and a
//! uniformly elliptic diffusion matrix `a`. Models come from a small
//! registered catalog described by [`ModelSpec`]; there is no expression
//! parser.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, MAT, MAX_DIM};

pub trait ScalarPotential: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], out: &mut [f64]);
    /// Row-major `n x n` Hessian.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
    /// Whether the potential is known to attain a unique, nondegenerate
    /// minimum at the origin.
    fn has_unique_minimum_at_origin(&self) -> bool {
        false
    }
}

pub trait CirculationField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], out: &mut [f64]);
    /// `out[i * n + j] = ∂_j c_i`.
    fn jacobian(&self, x: &[f64], out: &mut [f64]);
}

pub trait DiffusionField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64], out: &mut [f64]);
    /// `out = ∂_k a(x)`.
    fn partial(&self, x: &[f64], k: usize, out: &mut [f64]);
    fn is_constant(&self) -> bool;

    /// `(∇·a)_i = Σ_j ∂_j a_{ji}`.
    fn divergence(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        out[..n].iter_mut().for_each(|v| *v = 0.0);
        if self.is_constant() {
            return;
        }
        let mut p = [0.0; MAT];
        for j in 0..n {
            self.partial(x, j, &mut p);
            for i in 0..n {
                out[i] += p[j * n + i];
            }
        }
    }
}

/// `V(x) = ½ xᵀ K x` with `K` symmetric positive semidefinite.
#[derive(Clone, Debug)]
pub struct QuadraticPotential {
    n: usize,
    stiffness: Vec<f64>,
}

impl QuadraticPotential {
    pub fn new(n: usize, stiffness: Vec<f64>) -> Result<Self> {
        check_square(&stiffness, n, "stiffness")?;
        check_symmetric(&stiffness, n, "stiffness")?;
        if linalg::min_eigenvalue(&stiffness, n) < -1e-12 {
            return Err(Error::invalid("stiffness must be positive semidefinite"));
        }
        Ok(QuadraticPotential { n, stiffness })
    }

    pub fn isotropic(n: usize, k: f64) -> Self {
        QuadraticPotential {
            n,
            stiffness: scaled_identity(n, k),
        }
    }
}

impl ScalarPotential for QuadraticPotential {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, x: &[f64]) -> f64 {
        0.5 * linalg::bilinear(x, &self.stiffness, x, self.n)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        linalg::mat_vec(&self.stiffness, x, self.n, out);
    }
    fn hessian(&self, _x: &[f64], out: &mut [f64]) {
        out[..self.n * self.n].copy_from_slice(&self.stiffness);
    }
    fn has_unique_minimum_at_origin(&self) -> bool {
        linalg::min_eigenvalue(&self.stiffness, self.n) > 0.0
    }
}

/// One-dimensional `V(x) = h (x² - 1)² / 4`.
#[derive(Clone, Debug)]
pub struct DoubleWellPotential {
    pub scale: f64,
}

impl ScalarPotential for DoubleWellPotential {
    fn dim(&self) -> usize {
        1
    }
    fn value(&self, x: &[f64]) -> f64 {
        let u = x[0] * x[0] - 1.0;
        self.scale * u * u / 4.0
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.scale * (x[0] * x[0] * x[0] - x[0]);
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.scale * (3.0 * x[0] * x[0] - 1.0);
    }
}

/// `U = χ q + (1 - χ) V` where `q = κ|x|²/2` and `χ` is a C² quintic
/// step in `|x|²` equal to one inside `inner_radius` and zero outside
/// `outer_radius`. `U = V` outside `outer_radius`.
#[derive(Clone, Debug)]
pub struct BlendedPotential {
    outer: Arc<dyn ScalarPotential>,
    stiffness: f64,
    inner_radius: f64,
    outer_radius: f64,
}

impl BlendedPotential {
    pub fn new(
        outer: Arc<dyn ScalarPotential>,
        stiffness: f64,
        inner_radius: f64,
        outer_radius: f64,
    ) -> Result<Self> {
        if !(stiffness > 0.0) || !(inner_radius > 0.0) || !(outer_radius > inner_radius) {
            return Err(Error::invalid(
                "blend requires stiffness > 0 and 0 < inner radius < outer radius",
            ));
        }
        Ok(BlendedPotential {
            outer,
            stiffness,
            inner_radius,
            outer_radius,
        })
    }

    pub fn outer_radius(&self) -> f64 {
        self.outer_radius
    }

    /// `(χ, dχ/dρ, d²χ/dρ²)` at `ρ = |x|²`.
    fn cutoff(&self, rho: f64) -> (f64, f64, f64) {
        let r0 = self.inner_radius * self.inner_radius;
        let r1 = self.outer_radius * self.outer_radius;
        if rho <= r0 {
            return (1.0, 0.0, 0.0);
        }
        if rho >= r1 {
            return (0.0, 0.0, 0.0);
        }
        let w = r1 - r0;
        let u = (rho - r0) / w;
        let step = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
        let d1 = 30.0 * u * u * (1.0 - u) * (1.0 - u) / w;
        let d2 = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (w * w);
        (1.0 - step, -d1, -d2)
    }
}

impl ScalarPotential for BlendedPotential {
    fn dim(&self) -> usize {
        self.outer.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let rho = linalg::dot(x, x);
        let (chi, _, _) = self.cutoff(rho);
        let v = self.outer.value(x);
        v + chi * (0.5 * self.stiffness * rho - v)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let rho = linalg::dot(x, x);
        let (chi, d1, _) = self.cutoff(rho);
        let diff = 0.5 * self.stiffness * rho - self.outer.value(x);
        let mut gv = [0.0; MAX_DIM];
        self.outer.gradient(x, &mut gv);
        for i in 0..n {
            let gq = self.stiffness * x[i];
            out[i] = gv[i] + chi * (gq - gv[i]) + 2.0 * d1 * diff * x[i];
        }
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let rho = linalg::dot(x, x);
        let (chi, d1, d2) = self.cutoff(rho);
        let diff = 0.5 * self.stiffness * rho - self.outer.value(x);
        let mut gv = [0.0; MAX_DIM];
        let mut hv = [0.0; MAT];
        self.outer.gradient(x, &mut gv);
        self.outer.hessian(x, &mut hv);
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                let hq = self.stiffness * delta;
                let gi = self.stiffness * x[i] - gv[i];
                let gj = self.stiffness * x[j] - gv[j];
                out[i * n + j] = hv[i * n + j]
                    + chi * (hq - hv[i * n + j])
                    + 2.0 * d1 * (x[i] * gj + gi * x[j])
                    + diff * (4.0 * d2 * x[i] * x[j] + 2.0 * d1 * delta);
            }
        }
    }
    fn has_unique_minimum_at_origin(&self) -> bool {
        true
    }
}

/// `c(x) = C x`.
#[derive(Clone, Debug)]
pub struct LinearCirculation {
    n: usize,
    matrix: Vec<f64>,
}

impl LinearCirculation {
    pub fn new(n: usize, matrix: Vec<f64>) -> Result<Self> {
        check_square(&matrix, n, "circulation")?;
        Ok(LinearCirculation { n, matrix })
    }
}

impl CirculationField for LinearCirculation {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, x: &[f64], out: &mut [f64]) {
        linalg::mat_vec(&self.matrix, x, self.n, out);
    }
    fn jacobian(&self, _x: &[f64], out: &mut [f64]) {
        out[..self.n * self.n].copy_from_slice(&self.matrix);
    }
}

/// Planar `c(x) = γ J x / (1 + |x|²)`, `J` the rotation by π/2.
#[derive(Clone, Debug)]
pub struct BoundedRotation {
    pub gamma: f64,
}

impl CirculationField for BoundedRotation {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, x: &[f64], out: &mut [f64]) {
        let s = self.gamma / (1.0 + x[0] * x[0] + x[1] * x[1]);
        out[0] = -s * x[1];
        out[1] = s * x[0];
    }
    fn jacobian(&self, x: &[f64], out: &mut [f64]) {
        let d = 1.0 + x[0] * x[0] + x[1] * x[1];
        let s = self.gamma / d;
        let t = 2.0 * self.gamma / (d * d);
        let jx = [-x[1], x[0]];
        let j = [0.0, -1.0, 1.0, 0.0];
        for i in 0..2 {
            for k in 0..2 {
                out[i * 2 + k] = s * j[i * 2 + k] - t * jx[i] * x[k];
            }
        }
    }
}

/// Spatially constant circulation.
#[derive(Clone, Debug)]
pub struct ConstantCirculation {
    pub value: Vec<f64>,
}

impl CirculationField for ConstantCirculation {
    fn dim(&self) -> usize {
        self.value.len()
    }
    fn value(&self, _x: &[f64], out: &mut [f64]) {
        out[..self.value.len()].copy_from_slice(&self.value);
    }
    fn jacobian(&self, _x: &[f64], out: &mut [f64]) {
        let n = self.value.len();
        out[..n * n].iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Clone, Debug)]
pub struct ConstantDiffusion {
    n: usize,
    matrix: Vec<f64>,
}

impl ConstantDiffusion {
    pub fn new(n: usize, matrix: Vec<f64>) -> Result<Self> {
        check_square(&matrix, n, "diffusion")?;
        check_symmetric(&matrix, n, "diffusion")?;
        if !(linalg::min_eigenvalue(&matrix, n) > 0.0) {
            return Err(Error::invalid("diffusion matrix must be positive definite"));
        }
        Ok(ConstantDiffusion { n, matrix })
    }

    pub fn identity(n: usize) -> Self {
        ConstantDiffusion {
            n,
            matrix: scaled_identity(n, 1.0),
        }
    }
}

impl DiffusionField for ConstantDiffusion {
    fn dim(&self) -> usize {
        self.n
    }
    fn value(&self, _x: &[f64], out: &mut [f64]) {
        out[..self.n * self.n].copy_from_slice(&self.matrix);
    }
    fn partial(&self, _x: &[f64], _k: usize, out: &mut [f64]) {
        out[..self.n * self.n].iter_mut().for_each(|v| *v = 0.0);
    }
    fn is_constant(&self) -> bool {
        true
    }
}

/// `a(x) = A (1 + κ exp(-|x|²/2))` with `κ > -1`: bounded, smooth and
/// uniformly elliptic, with nonvanishing derivatives near the origin.
#[derive(Clone, Debug)]
pub struct ModulatedDiffusion {
    base: ConstantDiffusion,
    kappa: f64,
}

impl ModulatedDiffusion {
    pub fn new(base: ConstantDiffusion, kappa: f64) -> Result<Self> {
        if !(kappa > -1.0) || !kappa.is_finite() {
            return Err(Error::invalid("modulation must exceed -1"));
        }
        Ok(ModulatedDiffusion { base, kappa })
    }
}

impl DiffusionField for ModulatedDiffusion {
    fn dim(&self) -> usize {
        self.base.n
    }
    fn value(&self, x: &[f64], out: &mut [f64]) {
        let g = 1.0 + self.kappa * (-0.5 * linalg::dot(x, x)).exp();
        for (o, a) in out.iter_mut().zip(&self.base.matrix) {
            *o = a * g;
        }
    }
    fn partial(&self, x: &[f64], k: usize, out: &mut [f64]) {
        let dg = -self.kappa * (-0.5 * linalg::dot(x, x)).exp() * x[k];
        for (o, a) in out.iter_mut().zip(&self.base.matrix) {
            *o = a * dg;
        }
    }
    fn is_constant(&self) -> bool {
        self.kappa == 0.0
    }
}

fn one() -> f64 {
    1.0
}

/// Registered model families, as they appear in experiment files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `n = 2`, `V = |x|²/2`, `a = I`, `c = γ J x`.
    RotationalOu {
        #[serde(default = "one")]
        gamma: f64,
    },
    /// As `rotational-ou` with `c = γ J x / (1 + |x|²)`.
    BoundedRotation {
        #[serde(default = "one")]
        gamma: f64,
    },
    /// `n = 1`, `V = h (x² - 1)² / 4`, constant `a` and `c`.
    DoubleWell {
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        circulation: f64,
        #[serde(default = "one")]
        diffusion: f64,
    },
    /// Quadratic `V = ½ xᵀKx`, linear `c = Cx`, SPD `a`, optionally
    /// modulated by `1 + κ exp(-|x|²/2)`.
    AnisotropicOu {
        diffusion: Vec<Vec<f64>>,
        stiffness: Vec<Vec<f64>>,
        circulation: Vec<Vec<f64>>,
        #[serde(default)]
        modulation: f64,
    },
}

impl ModelSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ModelSpec::RotationalOu { .. } => "rotational-ou",
            ModelSpec::BoundedRotation { .. } => "bounded-rotation",
            ModelSpec::DoubleWell { .. } => "double-well",
            ModelSpec::AnisotropicOu { .. } => "anisotropic-ou",
        }
    }

    /// Rotation strength of the planar rotational families.
    pub fn rotation(&self) -> Option<f64> {
        match self {
            ModelSpec::RotationalOu { gamma } | ModelSpec::BoundedRotation { gamma } => Some(*gamma),
            _ => None,
        }
    }
}

/// A diffusion `dX = b(X) dt + sqrt(2ε) σ(X) dw` with `b = -a∇V + c` and
/// `σσᵀ = a`. Immutable and cheap to clone.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    family: String,
    spec: Option<ModelSpec>,
    dim: usize,
    potential: Arc<dyn ScalarPotential>,
    circulation: Arc<dyn CirculationField>,
    diffusion: Arc<dyn DiffusionField>,
}

impl DiffusionModel {
    pub fn new(
        family: impl Into<String>,
        potential: Arc<dyn ScalarPotential>,
        circulation: Arc<dyn CirculationField>,
        diffusion: Arc<dyn DiffusionField>,
    ) -> Result<Self> {
        let dim = potential.dim();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::invalid(format!(
                "dimension must be between 1 and {MAX_DIM}, got {dim}"
            )));
        }
        if circulation.dim() != dim || diffusion.dim() != dim {
            return Err(Error::invalid("model fields have inconsistent dimensions"));
        }
        Ok(DiffusionModel {
            family: family.into(),
            spec: None,
            dim,
            potential,
            circulation,
            diffusion,
        })
    }

    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        let mut model = match spec {
            ModelSpec::RotationalOu { gamma } => {
                check_finite(*gamma, "gamma")?;
                DiffusionModel::new(
                    spec.family(),
                    Arc::new(QuadraticPotential::isotropic(2, 1.0)),
                    Arc::new(LinearCirculation::new(2, vec![0.0, -gamma, *gamma, 0.0])?),
                    Arc::new(ConstantDiffusion::identity(2)),
                )?
            }
            ModelSpec::BoundedRotation { gamma } => {
                check_finite(*gamma, "gamma")?;
                DiffusionModel::new(
                    spec.family(),
                    Arc::new(QuadraticPotential::isotropic(2, 1.0)),
                    Arc::new(BoundedRotation { gamma: *gamma }),
                    Arc::new(ConstantDiffusion::identity(2)),
                )?
            }
            ModelSpec::DoubleWell {
                scale,
                circulation,
                diffusion,
            } => {
                if !(*scale > 0.0) {
                    return Err(Error::invalid("double-well scale must be positive"));
                }
                check_finite(*circulation, "circulation")?;
                DiffusionModel::new(
                    spec.family(),
                    Arc::new(DoubleWellPotential { scale: *scale }),
                    Arc::new(ConstantCirculation {
                        value: vec![*circulation],
                    }),
                    Arc::new(ConstantDiffusion::new(1, vec![*diffusion])?),
                )?
            }
            ModelSpec::AnisotropicOu {
                diffusion,
                stiffness,
                circulation,
                modulation,
            } => {
                let n = diffusion.len();
                let a = ConstantDiffusion::new(n, flatten(diffusion, n, "diffusion")?)?;
                let field: Arc<dyn DiffusionField> = if *modulation == 0.0 {
                    Arc::new(a)
                } else {
                    Arc::new(ModulatedDiffusion::new(a, *modulation)?)
                };
                DiffusionModel::new(
                    spec.family(),
                    Arc::new(QuadraticPotential::new(n, flatten(stiffness, n, "stiffness")?)?),
                    Arc::new(LinearCirculation::new(n, flatten(circulation, n, "circulation")?)?),
                    field,
                )?
            }
        };
        model.spec = Some(spec.clone());
        Ok(model)
    }

    pub fn rotational_ou(gamma: f64) -> Self {
        Self::from_spec(&ModelSpec::RotationalOu { gamma }).expect("valid catalog model")
    }

    pub fn bounded_rotation(gamma: f64) -> Self {
        Self::from_spec(&ModelSpec::BoundedRotation { gamma }).expect("valid catalog model")
    }

    pub fn double_well(circulation: f64) -> Self {
        Self::from_spec(&ModelSpec::DoubleWell {
            scale: 1.0,
            circulation,
            diffusion: 1.0,
        })
        .expect("valid catalog model")
    }

    /// One-dimensional Ornstein-Uhlenbeck process `dX = -X dt + sqrt(2ε) dw`.
    pub fn ou_1d() -> Self {
        Self::from_spec(&ModelSpec::AnisotropicOu {
            diffusion: vec![vec![1.0]],
            stiffness: vec![vec![1.0]],
            circulation: vec![vec![0.0]],
            modulation: 0.0,
        })
        .expect("valid catalog model")
    }

    pub fn family(&self) -> &str {
        &self.family
    }
    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn potential(&self) -> &Arc<dyn ScalarPotential> {
        &self.potential
    }
    pub fn circulation(&self) -> &Arc<dyn CirculationField> {
        &self.circulation
    }
    pub fn diffusion(&self) -> &Arc<dyn DiffusionField> {
        &self.diffusion
    }
    pub fn has_constant_diffusion(&self) -> bool {
        self.diffusion.is_constant()
    }

    /// Allocation-free drift evaluation; `x` is assumed finite.
    pub fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim;
        let mut g = [0.0; MAX_DIM];
        let mut a = [0.0; MAT];
        let mut c = [0.0; MAX_DIM];
        self.potential.gradient(x, &mut g);
        self.diffusion.value(x, &mut a);
        self.circulation.value(x, &mut c);
        for i in 0..n {
            let ag: f64 = (0..n).map(|j| a[i * n + j] * g[j]).sum();
            out[i] = c[i] - ag;
        }
    }

    pub fn drift(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &mut out);
        Ok(out)
    }

    /// `out[i * n + j] = ∂_j b_i`.
    pub fn drift_jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim;
        let mut g = [0.0; MAX_DIM];
        let mut a = [0.0; MAT];
        let mut h = [0.0; MAT];
        let mut dc = [0.0; MAT];
        let mut da = [0.0; MAT];
        self.potential.gradient(x, &mut g);
        self.potential.hessian(x, &mut h);
        self.diffusion.value(x, &mut a);
        self.circulation.jacobian(x, &mut dc);
        for i in 0..n {
            for j in 0..n {
                let ah: f64 = (0..n).map(|l| a[i * n + l] * h[l * n + j]).sum();
                out[i * n + j] = dc[i * n + j] - ah;
            }
        }
        if !self.diffusion.is_constant() {
            for j in 0..n {
                self.diffusion.partial(x, j, &mut da);
                for i in 0..n {
                    let dag: f64 = (0..n).map(|l| da[i * n + l] * g[l]).sum();
                    out[i * n + j] -= dag;
                }
            }
        }
    }

    /// Lower-triangular `σ` with `σσᵀ = a(x)`.
    pub fn noise_factor_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let mut a = [0.0; MAT];
        self.diffusion.value(x, &mut a);
        if linalg::cholesky(&a, self.dim, out) {
            Ok(())
        } else {
            Err(Error::EllipticityViolation { point: x.to_vec() })
        }
    }

    pub fn noise_factor(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_point(x)?;
        let mut out = vec![0.0; self.dim * self.dim];
        self.noise_factor_into(x, &mut out)?;
        Ok(out)
    }

    pub fn inverse_diffusion_into(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        let mut a = [0.0; MAT];
        self.diffusion.value(x, &mut a);
        if linalg::inverse_spd(&a, self.dim, out) {
            Ok(())
        } else {
            Err(Error::EllipticityViolation { point: x.to_vec() })
        }
    }

    /// The work field `f = a⁻¹ c` whose line integral defines the
    /// Gallavotti-Cohen observable.
    pub fn work_field_into(&self, x: &[f64], out: &mut [f64]) {
        let mut inv = [0.0; MAT];
        let mut c = [0.0; MAX_DIM];
        self.inverse_or_panic(x, &mut inv);
        self.circulation.value(x, &mut c);
        linalg::mat_vec(&inv, &c, self.dim, out);
    }

    /// `out[i * n + j] = ∂_j f_i` with `∂_j f = a⁻¹ (∂_j c - (∂_j a) f)`.
    pub fn work_field_jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim;
        let mut inv = [0.0; MAT];
        let mut c = [0.0; MAX_DIM];
        let mut f = [0.0; MAX_DIM];
        let mut dc = [0.0; MAT];
        let mut da = [0.0; MAT];
        self.inverse_or_panic(x, &mut inv);
        self.circulation.value(x, &mut c);
        self.circulation.jacobian(x, &mut dc);
        linalg::mat_vec(&inv, &c, n, &mut f);
        let constant = self.diffusion.is_constant();
        let mut col = [0.0; MAX_DIM];
        let mut res = [0.0; MAX_DIM];
        for j in 0..n {
            for i in 0..n {
                col[i] = dc[i * n + j];
            }
            if !constant {
                self.diffusion.partial(x, j, &mut da);
                for i in 0..n {
                    col[i] -= (0..n).map(|l| da[i * n + l] * f[l]).sum::<f64>();
                }
            }
            linalg::mat_vec(&inv, &col, n, &mut res);
            for i in 0..n {
                out[i * n + j] = res[i];
            }
        }
    }

    // Diffusion matrices are validated elliptic at construction; a failure
    // here means a field implementation broke its contract.
    fn inverse_or_panic(&self, x: &[f64], inv: &mut [f64]) {
        self.inverse_diffusion_into(x, inv)
            .expect("diffusion matrix lost positive definiteness");
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::invalid(format!(
                "point has dimension {}, model has {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("point has non-finite coordinates"));
        }
        Ok(())
    }
}

/// Per-radius diagnostics of the standing growth/ellipticity assumptions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RadiusDiagnostics {
    pub radius: f64,
    /// `min ∇V(x)·x/|x|` over the sampled sphere.
    pub radial_growth: f64,
    /// `min [∇V·a∇V - ε₀ tr(a D²V)]` over the sampled sphere.
    pub coercivity: f64,
    pub max_circulation: f64,
    pub max_circulation_jacobian: f64,
    pub min_ellipticity: f64,
    pub max_diffusion: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Warn,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub family: String,
    pub eps0: f64,
    pub radii: Vec<RadiusDiagnostics>,
    pub verdict: Verdict,
    pub warnings: Vec<String>,
}

fn sphere_points(n: usize, radius: f64) -> Vec<Vec<f64>> {
    match n {
        1 => vec![vec![radius], vec![-radius]],
        2 => (0..64)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / 64.0;
                vec![radius * th.cos(), radius * th.sin()]
            })
            .collect(),
        _ => {
            // Fibonacci lattice on the sphere.
            let m = 128;
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..m)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / m as f64;
                    let r = (1.0 - z * z).sqrt();
                    let th = golden * k as f64;
                    vec![radius * r * th.cos(), radius * r * th.sin(), radius * z]
                })
                .collect()
        }
    }
}

/// Grid diagnostics of the growth, boundedness and ellipticity
/// assumptions. Never fails; problems are reported as warnings.
pub fn check_assumptions(model: &DiffusionModel, radii: &[f64], eps0: f64) -> AssumptionReport {
    let n = model.dim();
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(radii.len());
    for &radius in radii {
        let mut row = RadiusDiagnostics {
            radius,
            radial_growth: f64::INFINITY,
            coercivity: f64::INFINITY,
            max_circulation: 0.0,
            max_circulation_jacobian: 0.0,
            min_ellipticity: f64::INFINITY,
            max_diffusion: 0.0,
        };
        for x in sphere_points(n, radius) {
            let mut g = [0.0; MAX_DIM];
            let mut h = [0.0; MAT];
            let mut a = [0.0; MAT];
            let mut c = [0.0; MAX_DIM];
            let mut dc = [0.0; MAT];
            model.potential.gradient(&x, &mut g);
            model.potential.hessian(&x, &mut h);
            model.diffusion.value(&x, &mut a);
            model.circulation.value(&x, &mut c);
            model.circulation.jacobian(&x, &mut dc);
            let norm = linalg::norm(&x).max(f64::MIN_POSITIVE);
            row.radial_growth = row.radial_growth.min(linalg::dot(&g[..n], &x) / norm);
            let trace_ah: f64 = (0..n)
                .map(|i| (0..n).map(|l| a[i * n + l] * h[l * n + i]).sum::<f64>())
                .sum();
            let coercive = linalg::bilinear(&g, &a, &g, n) - eps0 * trace_ah;
            row.coercivity = row.coercivity.min(coercive);
            row.max_circulation = row.max_circulation.max(linalg::norm(&c[..n]));
            row.max_circulation_jacobian = row.max_circulation_jacobian.max(linalg::frobenius(&dc, n));
            row.min_ellipticity = row.min_ellipticity.min(linalg::min_eigenvalue(&a, n));
            row.max_diffusion = row.max_diffusion.max(linalg::frobenius(&a, n));
        }
        rows.push(row);
    }

    let mut verdict = Verdict::Pass;
    if rows.len() < 2 {
        warnings.push("a single radius cannot show growth; supply at least two".to_string());
        verdict = Verdict::Warn;
    }
    let increasing = |f: fn(&RadiusDiagnostics) -> f64| rows.windows(2).all(|w| f(&w[1]) > f(&w[0]));
    if rows.len() >= 2 && !increasing(|r| r.radial_growth) {
        warnings.push("radial growth of ∇V is not increasing with the radius".to_string());
        verdict = Verdict::Warn;
    }
    if rows.len() >= 2 && !increasing(|r| r.coercivity) {
        warnings.push(format!(
            "coercivity ∇V·a∇V - {eps0} tr(aD²V) is not increasing with the radius"
        ));
        verdict = Verdict::Warn;
    }
    if rows.iter().any(|r| !(r.min_ellipticity > 0.0)) {
        warnings.push("diffusion matrix is not uniformly elliptic on the grid".to_string());
        verdict = Verdict::Warn;
    }
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        if last.radius >= 2.0 * first.radius && first.max_circulation > 0.0 {
            let growth = last.max_circulation / first.max_circulation;
            if growth > 0.75 * last.radius / first.radius {
                warnings.push(format!(
                    "circulation grows with the radius (x{growth:.2}); boundedness is violated"
                ));
            }
        }
        if last.radius >= 2.0 * first.radius && last.max_diffusion > 1.5 * first.max_diffusion {
            warnings.push("diffusion matrix grows with the radius".to_string());
        }
    }
    AssumptionReport {
        family: model.family().to_string(),
        eps0,
        radii: rows,
        verdict,
        warnings,
    }
}

fn scaled_identity(n: usize, k: f64) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = k;
    }
    m
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be finite")))
    }
}

fn check_square(m: &[f64], n: usize, what: &str) -> Result<()> {
    if n == 0 || m.len() != n * n || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} must be a finite {n}x{n} matrix")));
    }
    Ok(())
}

fn check_symmetric(m: &[f64], n: usize, what: &str) -> Result<()> {
    for i in 0..n {
        for j in 0..i {
            let (a, b) = (m[i * n + j], m[j * n + i]);
            if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                return Err(Error::invalid(format!("{what} must be symmetric")));
            }
        }
    }
    Ok(())
}

fn flatten(rows: &[Vec<f64>], n: usize, what: &str) -> Result<Vec<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(format!("{what} must be {n}x{n}")));
    }
    Ok(rows.iter().flatten().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd_model() -> DiffusionModel {
        DiffusionModel::from_spec(&ModelSpec::AnisotropicOu {
            diffusion: vec![vec![2.0, 1.0], vec![1.0, 2.0]],
            stiffness: vec![vec![1.5, 0.2], vec![0.2, 0.8]],
            circulation: vec![vec![0.1, -0.7], vec![0.7, 0.3]],
            modulation: 0.4,
        })
        .unwrap()
    }

    #[test]
    fn rotational_drift() {
        let m = DiffusionModel::rotational_ou(1.0);
        assert_eq!(m.drift(&[1.0, 0.0]).unwrap(), vec![-1.0, 1.0]);
        assert_eq!(m.drift(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn double_well_drift() {
        let m = DiffusionModel::double_well(0.0);
        assert_eq!(m.drift(&[2.0]).unwrap(), vec![-6.0]);
    }

    #[test]
    fn drift_rejects_non_finite() {
        let m = DiffusionModel::rotational_ou(1.0);
        assert!(matches!(m.drift(&[f64::NAN, 0.0]), Err(Error::InvalidArgument(_))));
        assert!(matches!(m.drift(&[0.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn noise_factor_examples() {
        let m = DiffusionModel::rotational_ou(1.0);
        assert_eq!(m.noise_factor(&[0.3, 0.1]).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        let diag = DiffusionModel::from_spec(&ModelSpec::AnisotropicOu {
            diffusion: vec![vec![4.0, 0.0], vec![0.0, 9.0]],
            stiffness: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            circulation: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            modulation: 0.0,
        })
        .unwrap();
        assert_eq!(diag.noise_factor(&[0.0, 0.0]).unwrap(), vec![2.0, 0.0, 0.0, 3.0]);
        let s = spd_model().noise_factor(&[0.0, 0.0]).unwrap();
        // a(0) = 1.4 * [[2,1],[1,2]]
        let target = [2.8, 1.4, 1.4, 2.8];
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| s[i * 2 + k] * s[j * 2 + k]).sum();
                assert!((v - target[i * 2 + j]).abs() <= 1e-12 * 2.8);
            }
        }
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = ModelSpec::AnisotropicOu {
            diffusion: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            stiffness: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            circulation: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            modulation: 0.0,
        };
        assert!(DiffusionModel::from_spec(&bad).is_err());
        let bad = ModelSpec::DoubleWell {
            scale: -1.0,
            circulation: 0.0,
            diffusion: 1.0,
        };
        assert!(DiffusionModel::from_spec(&bad).is_err());
    }

    #[test]
    fn spec_parses_from_toml() {
        let spec: ModelSpec = toml::from_str("family = \"rotational-ou\"\ngamma = 2.0").unwrap();
        assert_eq!(spec, ModelSpec::RotationalOu { gamma: 2.0 });
        let spec: ModelSpec = toml::from_str("family = \"double-well\"").unwrap();
        assert_eq!(spec.family(), "double-well");
        assert!(toml::from_str::<ModelSpec>("family = \"rotational-ou\"\ngamme = 2.0").is_err());
        assert!(toml::from_str::<ModelSpec>("family = \"lorenz\"").is_err());
    }

    #[test]
    fn divergence_of_modulated_diffusion() {
        let m = spd_model();
        let x = [0.3, -0.4];
        let mut div = [0.0; 2];
        m.diffusion().divergence(&x, &mut div);
        let h = 1e-6;
        for i in 0..2 {
            let mut fd = 0.0;
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let mut ap = [0.0; 4];
                let mut am = [0.0; 4];
                m.diffusion().value(&xp, &mut ap);
                m.diffusion().value(&xm, &mut am);
                fd += (ap[j * 2 + i] - am[j * 2 + i]) / (2.0 * h);
            }
            assert!((fd - div[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn assumption_report_examples() {
        let rep = check_assumptions(&DiffusionModel::rotational_ou(1.0), &[1.0, 2.0, 4.0, 8.0], 1.0);
        let growth: Vec<f64> = rep.radii.iter().map(|r| r.radial_growth).collect();
        for (g, r) in growth.iter().zip([1.0, 2.0, 4.0, 8.0]) {
            assert!((g - r).abs() < 1e-12);
        }
        assert_eq!(rep.verdict, Verdict::Pass);
        assert!(rep.warnings.iter().any(|w| w.contains("circulation")));

        let rep = check_assumptions(&DiffusionModel::double_well(0.0), &[2.0, 4.0], 1.0);
        assert!((rep.radii[0].radial_growth - 6.0).abs() < 1e-12);
        assert!((rep.radii[1].radial_growth - 60.0).abs() < 1e-12);
        assert_eq!(rep.verdict, Verdict::Pass);

        let flat = DiffusionModel::new(
            "flat",
            Arc::new(QuadraticPotential::isotropic(2, 0.0)),
            Arc::new(LinearCirculation::new(2, vec![0.0; 4]).unwrap()),
            Arc::new(ConstantDiffusion::identity(2)),
        )
        .unwrap();
        assert_eq!(check_assumptions(&flat, &[1.0, 2.0], 1.0).verdict, Verdict::Warn);

        let rep = check_assumptions(&DiffusionModel::bounded_rotation(1.0), &[1.0, 2.0, 4.0, 8.0], 1.0);
        assert!(rep.warnings.is_empty(), "{:?}", rep.warnings);
    }

    #[test]
    fn blended_potential_is_v_outside_and_minimal_at_origin() {
        let v: Arc<dyn ScalarPotential> = Arc::new(DoubleWellPotential { scale: 1.0 });
        let u = BlendedPotential::new(v.clone(), 1.0, 1.5, 2.0).unwrap();
        for k in 0..400 {
            let x = -4.0 + 8.0 * k as f64 / 399.0;
            if x.abs() > 2.0 {
                assert_eq!(u.value(&[x]), v.value(&[x]));
            }
            if x.abs() > 1e-9 {
                assert!(u.value(&[x]) > 0.0);
            }
        }
        assert_eq!(u.value(&[0.0]), 0.0);
        let mut h = [0.0];
        u.hessian(&[0.0], &mut h);
        assert!(h[0] > 0.0);
    }
}
