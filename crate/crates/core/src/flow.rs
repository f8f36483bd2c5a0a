//! Jump-reset derivative flows along reflected paths and the gradient
//! estimators built on them.

use crate::engine::{run_paths, run_paths_with, GradEstimate, PathStreams, RunPlan};
use crate::error::{Error, Result};
use crate::functions::{check_boundary_contract, ScalarField};
use crate::killed::{
    bridge_probability, euler_step_local, hit_indicator, StepMode, LOG_WEIGHT_LIMIT,
};
use crate::model::{LocalCoefficients, ModelSpec};
use crate::normal::upper_tail;
use crate::pushforward::add_scaled;
use crate::reflected::{local_time_increment_at, simulate_reflected_path, ReflectedPath};
use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowKind {
    /// Local-time loading `2 b1 dB`.
    Psi,
    /// Local-time loading `b1 dB`.
    Xi,
    /// Driftless-measure flow with the drift Jacobian corrected by `sigma^{-1} b`.
    Driftless,
}

impl FlowKind {
    fn loading(self) -> f64 {
        match self {
            FlowKind::Psi => 2.0,
            FlowKind::Xi => 1.0,
            FlowKind::Driftless => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FlowMatrix {
    kind: FlowKind,
    value: DMatrix<f64>,
    resets: Vec<usize>,
    exponent: f64,
    increment: DMatrix<f64>,
    product: DMatrix<f64>,
}

impl FlowMatrix {
    pub fn new(kind: FlowKind, dim: usize) -> Self {
        Self {
            kind,
            value: DMatrix::identity(dim, dim),
            resets: Vec::new(),
            exponent: 0.0,
            increment: DMatrix::zeros(dim, dim),
            product: DMatrix::zeros(dim, dim),
        }
    }

    pub fn kind(&self) -> FlowKind {
        self.kind
    }

    pub fn value(&self) -> &DMatrix<f64> {
        &self.value
    }

    /// Steps at which rows `2..d` were zeroed.
    pub fn resets(&self) -> &[usize] {
        &self.resets
    }

    pub fn restart(&mut self) {
        self.value.fill_with_identity();
        self.resets.clear();
        self.exponent = 0.0;
    }

    /// Projects onto the first row, verifying that row 1 is untouched and
    /// every other row is exactly zero afterwards.
    pub fn reset(&mut self, step: usize) -> Result<()> {
        let d = self.value.nrows();
        let before: Vec<u64> = self.value.row(0).iter().map(|v| v.to_bits()).collect();
        for i in 1..d {
            self.value.row_mut(i).fill(0.0);
        }
        let row_kept = self.value.row(0).iter().map(|v| v.to_bits()).eq(before);
        let rest_zero = (1..d).all(|i| self.value.row(i).iter().all(|&v| v == 0.0));
        if !(row_kept && rest_zero) {
            return Err(Error::Invariant(format!(
                "flow reset at step {step} is not a projection"
            )));
        }
        self.resets.push(step);
        Ok(())
    }

    /// Advances the flow over step `step` starting at a point where `local`
    /// was fully evaluated. A hit resets the flow before the increment.
    pub fn update(
        &mut self,
        local: &LocalCoefficients,
        dw: &[f64],
        db: f64,
        hit: bool,
        dt: f64,
        step: usize,
    ) -> Result<()> {
        if hit {
            self.reset(step)?;
        }
        let d = self.value.nrows();
        let c = self.kind.loading() * local.b[0] * db;
        self.exponent += c;
        if self.exponent.abs() > LOG_WEIGHT_LIMIT {
            return Err(Error::Numeric(format!(
                "flow loading {} overflows",
                self.exponent
            )));
        }
        self.increment.fill(0.0);
        for i in 0..d {
            self.increment[(i, i)] = 1.0 + c;
        }
        add_scaled(&mut self.increment, dt, &local.db);
        if self.kind == FlowKind::Driftless {
            let theta = local.drift_in_noise_units()?;
            for (k, dk) in local.dsigma.iter().enumerate() {
                add_scaled(&mut self.increment, -dt * theta[k], dk);
            }
        }
        for (k, dk) in local.dsigma.iter().enumerate() {
            add_scaled(&mut self.increment, dw[k], dk);
        }
        self.product.gemm(1.0, &self.increment, &self.value, 0.0);
        std::mem::swap(&mut self.value, &mut self.product);
        if self.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "flow is not finite after step {step}"
            )));
        }
        Ok(())
    }
}

struct FlowWorkspace {
    local: LocalCoefficients,
    boundary: LocalCoefficients,
    path: ReflectedPath,
    flow: FlowMatrix,
    grad_f: Vec<f64>,
}

impl FlowWorkspace {
    fn new(kind: FlowKind, dim: usize, steps: usize) -> Self {
        Self {
            local: LocalCoefficients::new(dim),
            boundary: LocalCoefficients::new(dim),
            path: ReflectedPath::new(dim, steps),
            flow: FlowMatrix::new(kind, dim),
            grad_f: vec![0.0; dim],
        }
    }
}

fn check_start(spec: &ModelSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.dim() || spec.distance(x) < 0.0 {
        return Err(Error::Contract(format!(
            "start point {x:?} must lie in the half-space"
        )));
    }
    Ok(())
}

fn endpoint_gradient(f: &dyn ScalarField, y: &[f64], grad: &mut [f64]) -> Result<f64> {
    f.gradient(y, grad);
    let v = f.value(y);
    if !v.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Data(format!("f or Df is not finite at {y:?}")));
    }
    Ok(v)
}

/// `out = grad^T m`.
fn row_times(grad: &[f64], m: &DMatrix<f64>, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = grad.iter().enumerate().map(|(i, g)| g * m[(i, j)]).sum();
    }
}

/// Runs `kind` along the stored path, calling `visit` before each step's update.
fn walk_flow(
    spec: &ModelSpec,
    ws: &mut FlowWorkspace,
    mut visit: impl FnMut(usize, &ReflectedPath, &LocalCoefficients, &FlowMatrix) -> Result<()>,
) -> Result<()> {
    ws.flow.restart();
    for i in 1..=ws.path.steps() {
        ws.local.eval(spec, ws.path.state(i - 1))?;
        visit(i, &ws.path, &ws.local, &ws.flow)?;
        ws.flow.update(
            &ws.local,
            ws.path.increment(i),
            ws.path.local_time_increment(i),
            ws.path.hit(i),
            ws.path.dt,
            i,
        )?;
    }
    Ok(())
}

/// Mean of `Df(Y_T) Psi_T` over drift-mode reflected paths.
pub fn grad_reflected_psi(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    x: &[f64],
    plan: &RunPlan,
) -> Result<GradEstimate> {
    check_boundary_contract(spec, f)?;
    check_start(spec, x)?;
    let d = spec.dim();
    let stats = run_paths_with(
        plan,
        d,
        || FlowWorkspace::new(FlowKind::Psi, d, plan.steps),
        |ws, index, out| {
            let mut streams = PathStreams::new(plan.seed, index);
            simulate_reflected_path(
                spec,
                x,
                StepMode::Drift,
                &mut streams,
                &mut ws.local,
                &mut ws.path,
            )?;
            walk_flow(spec, ws, |_, _, _, _| Ok(()))?;
            endpoint_gradient(f, ws.path.state(plan.steps), &mut ws.grad_f)?;
            row_times(&ws.grad_f, ws.flow.value(), out);
            Ok(())
        },
    )?;
    Ok(GradEstimate::from_stats(plan, &stats))
}

/// Mean of `Df(Y_T) xi_T` plus the boundary term at the last hit.
pub fn grad_reflected_intermediate(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    x: &[f64],
    plan: &RunPlan,
) -> Result<GradEstimate> {
    check_boundary_contract(spec, f)?;
    check_start(spec, x)?;
    let d = spec.dim();
    let stats = run_paths_with(
        plan,
        d,
        || FlowWorkspace::new(FlowKind::Xi, d, plan.steps),
        |ws, index, out| {
            let mut streams = PathStreams::new(plan.seed, index);
            simulate_reflected_path(
                spec,
                x,
                StepMode::Drift,
                &mut streams,
                &mut ws.local,
                &mut ws.path,
            )?;
            let last = ws.path.last_hit_step();
            if let Some(k) = last {
                ws.boundary.eval_values(spec, ws.path.state(k))?;
            }
            let ratio = ws.boundary.b[0] / ws.boundary.a11;
            let mut frozen = DVector::zeros(d);
            walk_flow(spec, ws, |i, _, _, flow| {
                if Some(i) == last {
                    frozen.copy_from(&flow.value().row(0).transpose());
                }
                Ok(())
            })?;
            let fy = endpoint_gradient(f, ws.path.state(plan.steps), &mut ws.grad_f)?;
            row_times(&ws.grad_f, ws.flow.value(), out);
            if last.is_some() {
                for (o, r) in out.iter_mut().zip(frozen.iter()) {
                    *o += fy * ratio * r;
                }
            }
            Ok(())
        },
    )?;
    Ok(GradEstimate::from_stats(plan, &stats))
}

/// Bismut-type estimate needing only `f`: the Ito sum of
/// `dW^T sigma^{-1} Psi`, restarted at each hit with the within-step remainder
/// `(Y^1_k - L) / a11 * row1(Psi)`, weighted by `f(Y_T) / T`.
pub fn grad_bel(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    x: &[f64],
    plan: &RunPlan,
) -> Result<GradEstimate> {
    check_boundary_contract(spec, f)?;
    check_start(spec, x)?;
    let d = spec.dim();
    let horizon = spec.horizon();
    let level = spec.level();
    let stats = run_paths_with(
        plan,
        d,
        || FlowWorkspace::new(FlowKind::Psi, d, plan.steps),
        |ws, index, out| {
            let mut streams = PathStreams::new(plan.seed, index);
            simulate_reflected_path(
                spec,
                x,
                StepMode::Drift,
                &mut streams,
                &mut ws.local,
                &mut ws.path,
            )?;
            let mut sum = DVector::zeros(d);
            walk_flow(spec, ws, |i, path, local, flow| {
                if path.hit(i) {
                    let scale = (path.state(i)[0] - level) / local.a11;
                    sum.copy_from(&(flow.value().row(0).transpose() * scale));
                } else {
                    let dw = DVector::from_column_slice(path.increment(i));
                    let v = local.left_solve(&dw)?;
                    sum.gemv_tr(1.0, flow.value(), &v, 1.0);
                }
                Ok(())
            })?;
            let fy = f.value(ws.path.state(plan.steps));
            if !fy.is_finite() {
                return Err(Error::Data("f is not finite at the endpoint".into()));
            }
            for (o, s) in out.iter_mut().zip(sum.iter()) {
                *o = fy * s / horizon;
            }
            Ok(())
        },
    )?;
    Ok(GradEstimate::from_stats(plan, &stats))
}

/// Monte Carlo mean of `gamma m_bar` over one driftless step next to the
/// closed-form expectation.
#[derive(Debug, Clone)]
pub struct GammaDiagnostic {
    pub mc_mean: DMatrix<f64>,
    pub mc_stderr: DMatrix<f64>,
    pub formula: DMatrix<f64>,
}

impl GammaDiagnostic {
    /// Largest entrywise `|mc - formula| / stderr`, zero where both agree exactly.
    pub fn max_z(&self) -> f64 {
        self.mc_mean
            .iter()
            .zip(self.formula.iter())
            .zip(self.mc_stderr.iter())
            .map(|((m, f), s)| crate::engine::combined_z(m - f, *s))
            .fold(0.0, f64::max)
    }
}

pub fn gamma_mean_diagnostic(
    spec: &ModelSpec,
    y_prev: &[f64],
    dt: f64,
    plan: &RunPlan,
) -> Result<GammaDiagnostic> {
    let d = spec.dim();
    let dist = spec.distance(y_prev);
    if !(dist > 0.0) {
        return Err(Error::Contract(
            "gamma diagnostic needs a start point off the boundary".into(),
        ));
    }
    let mut local = LocalCoefficients::new(d);
    local.eval(spec, y_prev)?;
    let db = local_time_increment_at(dist, local.a11, dt);

    let mut sigma_term = DMatrix::zeros(d, d);
    let mut grad = DVector::zeros(d);
    for k in 0..d {
        local.grad_sigma_row0_over_a11(k, &mut grad);
        sigma_term += local.sigma.column(k) * grad.transpose();
    }
    let mut drift_part = DMatrix::zeros(d, d);
    for (k, dk) in local.dsigma.iter().enumerate() {
        add_scaled(&mut drift_part, local.sigma[(0, k)], dk);
    }
    let u = dist / (local.a11 * dt).sqrt();
    let formula = (&drift_part * (dist / local.a11) + &sigma_term * dist) * (2.0 * upper_tail(u));

    let stats = run_paths(plan, d * d, |index, out| {
        let mut streams = PathStreams::new(plan.seed, index);
        let mut z = vec![0.0; d];
        let mut next = vec![0.0; d];
        streams.fill_increment(dt, &mut z);
        euler_step_local(&local, y_prev, &z, dt, StepMode::Driftless, &mut next);
        let p = bridge_probability(spec.level(), local.a11, y_prev[0], next[0], dt);
        let h = hit_indicator(streams.uniform(), p);
        let m_bar = if next[0] > spec.level() { 1.0 + h } else { 0.0 };
        let mut gamma = &drift_part * db;
        if h == 1.0 {
            for (k, dk) in local.dsigma.iter().enumerate() {
                add_scaled(&mut gamma, -z[k], dk);
            }
            gamma += &sigma_term * dist;
        }
        for (o, g) in out.iter_mut().zip(gamma.iter()) {
            *o = g * m_bar;
        }
        Ok(())
    })?;
    Ok(GammaDiagnostic {
        mc_mean: DMatrix::from_column_slice(d, d, stats.mean()),
        mc_stderr: DMatrix::from_column_slice(d, d, &stats.stderr()),
        formula,
    })
}
