//! The discrete push-forward gradient estimator on killed Euler paths.
//!
//! Along a path the step matrices `e_i` are multiplied from the left into
//! `E_i = e_i E_{i-1}`. The boundary weights `rho_i` enter through a running
//! row vector that is discounted by the killing weight of every later step,
//! so the whole estimator is evaluated in one forward pass.

use crate::engine::{run_paths_with, GradEstimate, PathStreams, RunPlan};
use crate::error::{Error, Result};
use crate::functions::{check_boundary_contract, ScalarField};
use crate::killed::{simulate_euler_path, step_weights, EulerPath, StepMode, WeightMode};
use crate::model::{LocalCoefficients, ModelSpec};
use nalgebra::{DMatrix, DVector};

/// Everything `e_i` and `rho_i` depend on. `local` must be fully evaluated
/// (values and Jacobians) at `x_prev`.
#[derive(Debug, Clone, Copy)]
pub struct StepFlowInputs<'a> {
    pub local: &'a LocalCoefficients,
    pub x_prev: &'a [f64],
    pub dw: &'a [f64],
    pub hit: bool,
    pub dt: f64,
    pub level: f64,
}

impl StepFlowInputs<'_> {
    fn distance(&self) -> f64 {
        self.x_prev[0] - self.level
    }
}

/// Scratch vectors for [`ei_matrix_into`] and [`rho_weight_into`].
#[derive(Debug, Clone)]
pub struct FlowScratch {
    grad: DVector<f64>,
}

impl FlowScratch {
    pub fn new(dim: usize) -> Self {
        Self {
            grad: DVector::zeros(dim),
        }
    }
}

pub fn ei_matrix_into(inputs: &StepFlowInputs, scratch: &mut FlowScratch, out: &mut DMatrix<f64>) {
    let local = inputs.local;
    let d = local.dim();
    out.fill(0.0);
    if inputs.hit {
        out[(0, 0)] = 1.0;
        let dist = inputs.distance();
        if dist != 0.0 {
            for k in 0..d {
                local.grad_sigma_row0_over_a11(k, &mut scratch.grad);
                for i in 0..d {
                    let s = dist * local.sigma[(i, k)];
                    for j in 0..d {
                        out[(i, j)] += s * scratch.grad[j];
                    }
                }
            }
            for l in 1..d {
                let a_l1 = local.sigma.row(l).dot(&local.sigma.row(0));
                out[(l, 0)] += a_l1 / local.a11;
            }
        }
    } else {
        for i in 0..d {
            out[(i, i)] = 1.0;
        }
        add_scaled(out, inputs.dt, &local.db);
        for (k, dk) in local.dsigma.iter().enumerate() {
            add_scaled(out, inputs.dw[k], dk);
        }
    }
}

/// `out += alpha * m`.
pub(crate) fn add_scaled(out: &mut DMatrix<f64>, alpha: f64, m: &DMatrix<f64>) {
    for (o, v) in out.iter_mut().zip(m.iter()) {
        *o += alpha * v;
    }
}

pub fn ei_matrix(inputs: &StepFlowInputs) -> DMatrix<f64> {
    let d = inputs.local.dim();
    let mut out = DMatrix::zeros(d, d);
    ei_matrix_into(inputs, &mut FlowScratch::new(d), &mut out);
    out
}

pub fn rho_weight_into(
    inputs: &StepFlowInputs,
    include_tilde: bool,
    scratch: &mut FlowScratch,
    out: &mut DVector<f64>,
) {
    out.fill(0.0);
    if !inputs.hit {
        return;
    }
    let local = inputs.local;
    out[0] = local.b[0] / local.a11;
    if include_tilde {
        local.grad_b1_over_a11(&mut scratch.grad);
        out.axpy(inputs.distance(), &scratch.grad, 1.0);
    }
}

pub fn rho_weight(inputs: &StepFlowInputs) -> DVector<f64> {
    let d = inputs.local.dim();
    let mut out = DVector::zeros(d);
    rho_weight_into(inputs, true, &mut FlowScratch::new(d), &mut out);
    out
}

#[derive(Debug, Clone, Copy)]
pub struct PushforwardOptions {
    /// Keep the `x1 * D(b1/a11)` part of the boundary weight.
    pub include_rho_tilde: bool,
}

impl Default for PushforwardOptions {
    fn default() -> Self {
        Self {
            include_rho_tilde: true,
        }
    }
}

pub(crate) struct PushforwardWorkspace {
    local: LocalCoefficients,
    path: EulerPath,
    scratch: FlowScratch,
    e: DMatrix<f64>,
    flow: DMatrix<f64>,
    next: DMatrix<f64>,
    rho: DVector<f64>,
    acc: DVector<f64>,
    grad_f: Vec<f64>,
}

impl PushforwardWorkspace {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self {
            local: LocalCoefficients::new(dim),
            path: EulerPath::new(dim, steps),
            scratch: FlowScratch::new(dim),
            e: DMatrix::zeros(dim, dim),
            flow: DMatrix::zeros(dim, dim),
            next: DMatrix::zeros(dim, dim),
            rho: DVector::zeros(dim),
            acc: DVector::zeros(dim),
            grad_f: vec![0.0; dim],
        }
    }
}

/// Evaluates the estimator on the path stored in `ws.path`.
fn pushforward_sample(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    opts: PushforwardOptions,
    ws: &mut PushforwardWorkspace,
    out: &mut [f64],
) -> Result<()> {
    let d = spec.dim();
    let n = ws.path.steps();
    ws.flow.fill_with_identity();
    ws.acc.fill(0.0);
    let mut m_bar = 1.0;
    for i in 1..=n {
        let path = &ws.path;
        let (m, mb) = step_weights(
            spec.distance(path.state(i)),
            path.bridge_prob(i),
            path.uniform(i),
            WeightMode::Bernoulli,
        );
        if mb == 0.0 {
            return Ok(());
        }
        ws.local.eval(spec, path.state(i - 1))?;
        let inputs = StepFlowInputs {
            local: &ws.local,
            x_prev: path.state(i - 1),
            dw: path.increment(i),
            hit: path.hit(i),
            dt: path.dt,
            level: spec.level(),
        };
        rho_weight_into(
            &inputs,
            opts.include_rho_tilde,
            &mut ws.scratch,
            &mut ws.rho,
        );
        ei_matrix_into(&inputs, &mut ws.scratch, &mut ws.e);
        if inputs.hit && inputs.distance() == 0.0 {
            check_jump_kill(&ws.e)?;
        }
        m_bar *= mb;
        ws.acc *= m;
        ws.acc.gemv_tr(m_bar, &ws.flow, &ws.rho, 1.0);
        ws.next.gemm(1.0, &ws.e, &ws.flow, 0.0);
        std::mem::swap(&mut ws.flow, &mut ws.next);
    }
    let xn = ws.path.state(n);
    f.gradient(xn, &mut ws.grad_f);
    let fx = f.value(xn);
    if !fx.is_finite() || ws.grad_f.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("f or Df is not finite at {xn:?}")));
    }
    for j in 0..d {
        let mut v = 0.0;
        for i in 0..d {
            v += ws.grad_f[i] * ws.flow[(i, j)];
        }
        out[j] = v * m_bar + fx * ws.acc[j];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("push-forward sample is not finite".into()));
    }
    Ok(())
}

/// At a boundary start with a sampled hit, `e_i` must equal `e1 e1^T`.
pub fn check_jump_kill(e: &DMatrix<f64>) -> Result<()> {
    let d = e.nrows();
    for i in 0..d {
        for j in 0..d {
            let expected = if i == 0 && j == 0 { 1.0 } else { 0.0 };
            if e[(i, j)] != expected {
                return Err(Error::Invariant(format!(
                    "step matrix entry ({i}, {j}) is {} at a boundary hit",
                    e[(i, j)]
                )));
            }
        }
    }
    Ok(())
}

/// The products `E_0 = I, E_i = e_i E_{i-1}` along a stored drift-mode path.
pub fn flow_products(spec: &ModelSpec, path: &EulerPath) -> Result<Vec<DMatrix<f64>>> {
    let d = spec.dim();
    let mut local = LocalCoefficients::new(d);
    let mut scratch = FlowScratch::new(d);
    let mut e = DMatrix::zeros(d, d);
    let mut out = vec![DMatrix::identity(d, d)];
    for i in 1..=path.steps() {
        local.eval(spec, path.state(i - 1))?;
        let inputs = StepFlowInputs {
            local: &local,
            x_prev: path.state(i - 1),
            dw: path.increment(i),
            hit: path.hit(i),
            dt: path.dt,
            level: spec.level(),
        };
        ei_matrix_into(&inputs, &mut scratch, &mut e);
        let last = out.last().expect("nonempty");
        out.push(&e * last);
    }
    Ok(out)
}

/// Push-forward estimate of the gradient of `x -> E[f(X_T) 1_{tau > T}]`.
pub fn grad_killed_pushforward(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    x: &[f64],
    plan: &RunPlan,
    opts: PushforwardOptions,
) -> Result<GradEstimate> {
    check_boundary_contract(spec, f)?;
    let d = spec.dim();
    if x.len() != d || spec.distance(x) <= 0.0 {
        return Err(Error::Contract(format!(
            "start point {x:?} must lie inside the half-space"
        )));
    }
    let stats = run_paths_with(
        plan,
        d,
        || PushforwardWorkspace::new(d, plan.steps),
        |ws, index, out| {
            let mut streams = PathStreams::new(plan.seed, index);
            simulate_euler_path(
                spec,
                x,
                StepMode::Drift,
                &mut streams,
                &mut ws.local,
                &mut ws.path,
            )?;
            pushforward_sample(spec, f, opts, ws, out)
        },
    )?;
    Ok(GradEstimate::from_stats(plan, &stats))
}
