//! Diffusion models on the half-space `(L, inf) x R^(d-1)`.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use std::fmt;
use std::sync::Arc;

/// Coefficient fields of `dX = b(X) dt + sigma(X) dW`.
///
/// Every output buffer is zeroed by the caller, so implementations only need
/// to write nonzero entries. `diffusion_column_jacobians` fills `out[k]` with
/// the Jacobian of the `k`-th column of `sigma`, i.e. `out[k][(i, j)]` is the
/// derivative of `sigma[(i, k)]` with respect to `x[j]`.
pub trait Coefficients: Send + Sync {
    fn dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut DVector<f64>);
    fn diffusion(&self, x: &[f64], out: &mut DMatrix<f64>);
    fn drift_jacobian(&self, x: &[f64], out: &mut DMatrix<f64>);
    fn diffusion_column_jacobians(&self, x: &[f64], out: &mut [DMatrix<f64>]);
}

#[derive(Clone)]
pub struct ModelSpec {
    name: String,
    coeffs: Arc<dyn Coefficients>,
    level: f64,
    horizon: f64,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim())
            .field("level", &self.level)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        coeffs: Arc<dyn Coefficients>,
        level: f64,
        horizon: f64,
    ) -> Result<Self> {
        if coeffs.dim() == 0 {
            return Err(Error::Model("dimension must be at least 1".into()));
        }
        if !level.is_finite() {
            return Err(Error::Model(format!(
                "boundary level {level} is not finite"
            )));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Model(format!("horizon {horizon} must be positive")));
        }
        Ok(Self {
            name: name.into(),
            coeffs,
            level,
            horizon,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.coeffs.dim()
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn coefficients(&self) -> &dyn Coefficients {
        self.coeffs.as_ref()
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        Self::new(self.name.clone(), self.coeffs.clone(), self.level, horizon)
    }

    /// Signed distance of `x` to the boundary along the first axis.
    pub fn distance(&self, x: &[f64]) -> f64 {
        x[0] - self.level
    }

    pub fn diffusion_at(&self, x: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let mut s = DMatrix::zeros(d, d);
        self.coeffs.diffusion(x, &mut s);
        s
    }

    pub fn drift_at(&self, x: &[f64]) -> DVector<f64> {
        let mut b = DVector::zeros(self.dim());
        self.coeffs.drift(x, &mut b);
        b
    }
}

/// `a(x) = sigma(x) sigma(x)^T`.
pub fn covariance(spec: &ModelSpec, x: &[f64]) -> DMatrix<f64> {
    let s = spec.diffusion_at(x);
    &s * s.transpose()
}

/// Coefficients and derived quantities evaluated at one point, reusing buffers.
#[derive(Debug, Clone)]
pub struct LocalCoefficients {
    pub b: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub db: DMatrix<f64>,
    pub dsigma: Vec<DMatrix<f64>>,
    pub a11: f64,
    grad_a11: DVector<f64>,
}

impl LocalCoefficients {
    pub fn new(dim: usize) -> Self {
        Self {
            b: DVector::zeros(dim),
            sigma: DMatrix::zeros(dim, dim),
            db: DMatrix::zeros(dim, dim),
            dsigma: vec![DMatrix::zeros(dim, dim); dim],
            a11: 0.0,
            grad_a11: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Evaluates drift and diffusion only.
    pub fn eval_values(&mut self, spec: &ModelSpec, x: &[f64]) -> Result<()> {
        let c = spec.coefficients();
        self.b.fill(0.0);
        self.sigma.fill(0.0);
        c.drift(x, &mut self.b);
        c.diffusion(x, &mut self.sigma);
        self.a11 = self.sigma.row(0).norm_squared();
        if !(self.b.iter().all(|v| v.is_finite()) && self.sigma.iter().all(|v| v.is_finite())) {
            return Err(Error::Model(format!("non-finite coefficients at {x:?}")));
        }
        if self.a11 <= 0.0 {
            return Err(Error::Model(format!("a11 vanishes at {x:?}")));
        }
        Ok(())
    }

    /// Evaluates values and all Jacobians.
    pub fn eval(&mut self, spec: &ModelSpec, x: &[f64]) -> Result<()> {
        self.eval_values(spec, x)?;
        let c = spec.coefficients();
        self.db.fill(0.0);
        c.drift_jacobian(x, &mut self.db);
        for m in &mut self.dsigma {
            m.fill(0.0);
        }
        c.diffusion_column_jacobians(x, &mut self.dsigma);
        self.grad_a11.fill(0.0);
        for (k, dk) in self.dsigma.iter().enumerate() {
            let s0k = self.sigma[(0, k)];
            for j in 0..self.dim() {
                self.grad_a11[j] += 2.0 * s0k * dk[(0, j)];
            }
        }
        let finite = self.db.iter().all(|v| v.is_finite())
            && self.dsigma.iter().all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Model(format!("non-finite Jacobians at {x:?}")));
        }
        Ok(())
    }

    /// Gradient of `y -> sigma[(0, k)](y) / a11(y)`.
    pub fn grad_sigma_row0_over_a11(&self, k: usize, out: &mut DVector<f64>) {
        let s0k = self.sigma[(0, k)];
        let a = self.a11;
        for j in 0..self.dim() {
            out[j] = self.dsigma[k][(0, j)] / a - s0k * self.grad_a11[j] / (a * a);
        }
    }

    /// Gradient of `y -> b[0](y) / a11(y)`.
    pub fn grad_b1_over_a11(&self, out: &mut DVector<f64>) {
        let a = self.a11;
        for j in 0..self.dim() {
            out[j] = self.db[(0, j)] / a - self.b[0] * self.grad_a11[j] / (a * a);
        }
    }

    /// `theta = sigma^{-1} b`.
    pub fn drift_in_noise_units(&self) -> Result<DVector<f64>> {
        self.sigma
            .clone()
            .lu()
            .solve(&self.b)
            .ok_or_else(|| Error::Model("diffusion matrix is singular".into()))
    }

    /// Row vector `v^T sigma^{-1}`.
    pub fn left_solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.sigma
            .transpose()
            .lu()
            .solve(v)
            .ok_or_else(|| Error::Model("diffusion matrix is singular".into()))
    }
}

/// Axis-aligned region sampled by [`validate_hypothesis1`]. The first
/// coordinate is clipped to the closed half-space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ProbeBox {
    /// `[L, L + 3] x [-3, 3]^(d-1)`.
    pub fn around_boundary(spec: &ModelSpec) -> Self {
        let d = spec.dim();
        let mut lower = vec![-3.0; d];
        let mut upper = vec![3.0; d];
        lower[0] = spec.level();
        upper[0] = spec.level() + 3.0;
        Self { lower, upper }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisReport {
    pub ellipticity_floor: f64,
    pub max_boundary_violation: f64,
    pub probe_count: usize,
    pub invertible: bool,
    pub pass: bool,
}

pub const BOUNDARY_TOLERANCE: f64 = 1e-10;

fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut value = 0.0;
    while index > 0 {
        value += (index % base) as f64 * inv;
        index /= base;
        inv /= base as f64;
    }
    value
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Deterministic Halton point `index` inside `bx`.
pub fn halton_point(bx: &ProbeBox, index: u64) -> Vec<f64> {
    bx.lower
        .iter()
        .zip(&bx.upper)
        .enumerate()
        .map(|(j, (lo, hi))| lo + (hi - lo) * radical_inverse(index + 1, PRIMES[j % PRIMES.len()]))
        .collect()
}

/// Probes uniform ellipticity and the boundary structure of `sigma`.
///
/// Each probe index yields an interior point from the Halton sequence and its
/// projection onto the boundary.
pub fn validate_hypothesis1(
    spec: &ModelSpec,
    probe_box: &ProbeBox,
    n_probes: usize,
) -> Result<HypothesisReport> {
    if n_probes == 0 {
        return Err(Error::Contract("n_probes must be at least 1".into()));
    }
    let d = spec.dim();
    if probe_box.lower.len() != d || probe_box.upper.len() != d {
        return Err(Error::Contract("probe box dimension mismatch".into()));
    }
    let mut floor = f64::INFINITY;
    let mut violation: f64 = 0.0;
    let mut invertible = true;
    for i in 0..n_probes as u64 {
        let mut x = halton_point(probe_box, i);
        x[0] = x[0].max(spec.level());
        let s = spec.diffusion_at(&x);
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("non-finite diffusion at {x:?}")));
        }
        let a = &s * s.transpose();
        let eig = SymmetricEigen::new(a).eigenvalues.min();
        floor = floor.min(eig);
        invertible &= s.clone().lu().is_invertible();

        x[0] = spec.level();
        let sb = spec.diffusion_at(&x);
        if sb.iter().any(|v| !v.is_finite()) {
            return Err(Error::Model(format!("non-finite diffusion at {x:?}")));
        }
        for l in 1..d {
            violation = violation.max(sb[(0, l)].abs()).max(sb[(l, 0)].abs());
        }
    }
    let pass = floor > 0.0 && invertible && violation <= BOUNDARY_TOLERANCE;
    Ok(HypothesisReport {
        ellipticity_floor: floor,
        max_boundary_violation: violation,
        probe_count: n_probes,
        invertible,
        pass,
    })
}

/// Below this distance to the boundary [`hat_a`] switches to a one-sided difference.
pub fn quotient_threshold(x1: f64) -> f64 {
    1e-6 * x1.abs().max(1.0)
}

const ONE_SIDED_STEP: f64 = 1e-5;

fn a_l1(spec: &ModelSpec, x: &[f64], l: usize) -> f64 {
    let s = spec.diffusion_at(x);
    s.row(l).dot(&s.row(0))
}

/// The boundary quotient `a^{l1}(x) / (x^1 - L)` for a zero-based index `l >= 1`.
pub fn hat_a(spec: &ModelSpec, x: &[f64], l: usize) -> Result<f64> {
    if l == 0 || l >= spec.dim() {
        return Err(Error::Contract(format!(
            "hat_a index {l} out of range 1..{}",
            spec.dim()
        )));
    }
    let dist = spec.distance(x);
    let value = if dist.abs() > quotient_threshold(x[0]) {
        a_l1(spec, x, l) / dist
    } else {
        let mut y = x.to_vec();
        y[0] = spec.level();
        let at_boundary = a_l1(spec, &y, l);
        y[0] = spec.level() + ONE_SIDED_STEP;
        (a_l1(spec, &y, l) - at_boundary) / ONE_SIDED_STEP
    };
    if !value.is_finite() {
        return Err(Error::Model(format!("hat_a is not finite at {x:?}")));
    }
    Ok(value)
}

/// The column-1 matrix with entries `hat_a^l / a11` in rows `2..d`.
pub fn pi_matrix(spec: &ModelSpec, x: &[f64]) -> Result<DMatrix<f64>> {
    let d = spec.dim();
    let a11 = covariance(spec, x)[(0, 0)];
    let mut pi = DMatrix::zeros(d, d);
    for l in 1..d {
        pi[(l, 0)] = hat_a(spec, x, l)? / a11;
    }
    Ok(pi)
}

/// One-dimensional Brownian motion with constant drift and unit volatility.
#[derive(Debug, Clone, Copy)]
pub struct BrownianDrift {
    pub drift: f64,
}

impl Coefficients for BrownianDrift {
    fn dim(&self) -> usize {
        1
    }
    fn drift(&self, _: &[f64], out: &mut DVector<f64>) {
        out[0] = self.drift;
    }
    fn diffusion(&self, _: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = 1.0;
    }
    fn drift_jacobian(&self, _: &[f64], _: &mut DMatrix<f64>) {}
    fn diffusion_column_jacobians(&self, _: &[f64], _: &mut [DMatrix<f64>]) {}
}

/// `sigma = [[a, 0], [rho (x^1 - L), c]]` with zero drift.
#[derive(Debug, Clone, Copy)]
pub struct Intro2d {
    pub a: f64,
    pub rho: f64,
    pub c: f64,
    pub level: f64,
}

impl Coefficients for Intro2d {
    fn dim(&self) -> usize {
        2
    }
    fn drift(&self, _: &[f64], _: &mut DVector<f64>) {}
    fn diffusion(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = self.a;
        out[(1, 0)] = self.rho * (x[0] - self.level);
        out[(1, 1)] = self.c;
    }
    fn drift_jacobian(&self, _: &[f64], _: &mut DMatrix<f64>) {}
    fn diffusion_column_jacobians(&self, _: &[f64], out: &mut [DMatrix<f64>]) {
        out[0][(1, 0)] = self.rho;
    }
}

/// Diagonal state-dependent volatility with a bounded drift.
#[derive(Debug, Clone, Copy)]
pub struct Diag2d {
    pub level: f64,
}

fn sech2(z: f64) -> f64 {
    let c = z.cosh();
    1.0 / (c * c)
}

impl Coefficients for Diag2d {
    fn dim(&self) -> usize {
        2
    }
    fn drift(&self, x: &[f64], out: &mut DVector<f64>) {
        out[0] = 0.1 * x[1].cos();
        out[1] = -0.1 * x[1].tanh();
    }
    fn diffusion(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 0)] = 1.0 + 0.2 * (x[0] - self.level).tanh();
        out[(1, 1)] = 1.0 + 0.2 * x[1].tanh();
    }
    fn drift_jacobian(&self, x: &[f64], out: &mut DMatrix<f64>) {
        out[(0, 1)] = -0.1 * x[1].sin();
        out[(1, 1)] = -0.1 * sech2(x[1]);
    }
    fn diffusion_column_jacobians(&self, x: &[f64], out: &mut [DMatrix<f64>]) {
        out[0][(0, 0)] = 0.2 * sech2(x[0] - self.level);
        out[1][(1, 1)] = 0.2 * sech2(x[1]);
    }
}

/// Constant diffusion matrix and zero drift.
#[derive(Debug, Clone)]
pub struct ConstantDiffusion {
    pub sigma: DMatrix<f64>,
}

impl Coefficients for ConstantDiffusion {
    fn dim(&self) -> usize {
        self.sigma.nrows()
    }
    fn drift(&self, _: &[f64], _: &mut DVector<f64>) {}
    fn diffusion(&self, _: &[f64], out: &mut DMatrix<f64>) {
        out.copy_from(&self.sigma);
    }
    fn drift_jacobian(&self, _: &[f64], _: &mut DMatrix<f64>) {}
    fn diffusion_column_jacobians(&self, _: &[f64], _: &mut [DMatrix<f64>]) {}
}

pub const MODEL_NAMES: [&str; 4] = ["bm1d", "intro2d", "diag2d", "skew2d"];

/// Builds a registry model. `drift` only applies to `bm1d`.
pub fn registry_model(name: &str, horizon: f64, drift: f64) -> Result<ModelSpec> {
    let coeffs: Arc<dyn Coefficients> = match name {
        "bm1d" => Arc::new(BrownianDrift { drift }),
        "intro2d" => Arc::new(Intro2d {
            a: 1.0,
            rho: 0.4,
            c: 1.0,
            level: 0.0,
        }),
        "diag2d" => Arc::new(Diag2d { level: 0.0 }),
        "skew2d" => Arc::new(ConstantDiffusion {
            sigma: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
        }),
        other => {
            return Err(Error::Config(format!(
                "unknown model '{other}' (expected one of {})",
                MODEL_NAMES.join(", ")
            )))
        }
    };
    ModelSpec::new(name, coeffs, 0.0, horizon)
}
