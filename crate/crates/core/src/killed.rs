//! Euler paths for the killed diffusion, bridge crossing probabilities,
//! killing weights and Girsanov weights.

use crate::engine::{run_paths_with, PathStreams, RunPlan};
use crate::error::{Error, Result};
use crate::functions::ScalarField;
use crate::model::{LocalCoefficients, ModelSpec};

/// Largest admissible magnitude of an accumulated log-weight.
pub const LOG_WEIGHT_LIMIT: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepMode {
    /// Simulate under the original measure, drift included.
    Drift,
    /// Simulate without drift; the drift is restored by Girsanov weights.
    Driftless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    Bernoulli,
    /// Replaces the sampled hit indicator by its conditional probability.
    Smoothed,
}

/// Writes `x + b(x) dt + sigma(x) dw` (drift omitted in driftless mode) into `out`,
/// with `local` already evaluated at `x`.
pub fn euler_step_local(
    local: &LocalCoefficients,
    x: &[f64],
    dw: &[f64],
    dt: f64,
    mode: StepMode,
    out: &mut [f64],
) {
    let d = x.len();
    for i in 0..d {
        let mut v = x[i];
        if mode == StepMode::Drift {
            v += local.b[i] * dt;
        }
        for k in 0..d {
            v += local.sigma[(i, k)] * dw[k];
        }
        out[i] = v;
    }
}

pub fn euler_step(
    spec: &ModelSpec,
    x: &[f64],
    dw: &[f64],
    dt: f64,
    mode: StepMode,
) -> Result<Vec<f64>> {
    let mut local = LocalCoefficients::new(spec.dim());
    local.eval_values(spec, x)?;
    let mut out = vec![0.0; x.len()];
    euler_step_local(&local, x, dw, dt, mode, &mut out);
    Ok(out)
}

/// Probability that a Brownian bridge with variance rate `a11` between two
/// grid values of the first coordinate touches `level`.
pub fn bridge_probability(level: f64, a11: f64, prev1: f64, next1: f64, dt: f64) -> f64 {
    let (u, v) = (prev1 - level, next1 - level);
    if u <= 0.0 || v <= 0.0 {
        return 1.0;
    }
    (-2.0 * u * v / (a11 * dt)).exp().clamp(0.0, 1.0)
}

/// [`bridge_probability`] with `a11` taken at `x_prev`.
pub fn bridge_survival(spec: &ModelSpec, x_prev: &[f64], x_next: &[f64], dt: f64) -> Result<f64> {
    if dt <= 0.0 {
        return Err(Error::Contract(format!("time step {dt} must be positive")));
    }
    let s = spec.diffusion_at(x_prev);
    let a11 = s.row(0).norm_squared();
    Ok(bridge_probability(
        spec.level(),
        a11,
        x_prev[0],
        x_next[0],
        dt,
    ))
}

/// `(m, m_bar)` for a step ending at distance `dist_next` from the boundary.
pub fn step_weights(dist_next: f64, p: f64, u: f64, mode: WeightMode) -> (f64, f64) {
    if dist_next <= 0.0 {
        return (0.0, 0.0);
    }
    let h = match mode {
        WeightMode::Bernoulli => hit_indicator(u, p),
        WeightMode::Smoothed => p,
    };
    (1.0 - h, 1.0 + h)
}

pub fn hit_indicator(u: f64, p: f64) -> f64 {
    if u <= p {
        1.0
    } else {
        0.0
    }
}

/// `theta . z - |theta|^2 dt / 2` with `theta = sigma^{-1} b` at the step start.
pub fn girsanov_log_increment(local: &LocalCoefficients, z: &[f64], dt: f64) -> Result<f64> {
    let theta = local.drift_in_noise_units()?;
    let dot: f64 = theta.iter().zip(z).map(|(t, z)| t * z).sum();
    Ok(dot - 0.5 * theta.norm_squared() * dt)
}

/// One discrete trajectory with all of its random inputs. Step quantities are
/// indexed `1..=n` and states `0..=n`.
#[derive(Debug, Clone, PartialEq)]
pub struct EulerPath {
    dim: usize,
    steps: usize,
    pub dt: f64,
    pub mode: StepMode,
    states: Vec<f64>,
    increments: Vec<f64>,
    uniforms: Vec<f64>,
    probs: Vec<f64>,
    hits: Vec<bool>,
}

impl EulerPath {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self {
            dim,
            steps,
            dt: 0.0,
            mode: StepMode::Drift,
            states: vec![0.0; (steps + 1) * dim],
            increments: vec![0.0; steps * dim],
            uniforms: vec![0.0; steps],
            probs: vec![0.0; steps],
            hits: vec![false; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[(i - 1) * self.dim..i * self.dim]
    }

    pub fn uniform(&self, i: usize) -> f64 {
        self.uniforms[i - 1]
    }

    pub fn bridge_prob(&self, i: usize) -> f64 {
        self.probs[i - 1]
    }

    pub fn hit(&self, i: usize) -> bool {
        self.hits[i - 1]
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }
}

/// Simulates `path.steps()` Euler steps from `x0` over the model horizon.
pub fn simulate_euler_path(
    spec: &ModelSpec,
    x0: &[f64],
    mode: StepMode,
    streams: &mut PathStreams,
    local: &mut LocalCoefficients,
    path: &mut EulerPath,
) -> Result<()> {
    let d = spec.dim();
    if x0.len() != d || path.dim != d {
        return Err(Error::Contract(format!(
            "expected a point of dimension {d}"
        )));
    }
    let n = path.steps;
    let dt = spec.horizon() / n as f64;
    path.dt = dt;
    path.mode = mode;
    path.states[..d].copy_from_slice(x0);
    for i in 1..=n {
        let (head, tail) = path.states.split_at_mut(i * d);
        let prev = &head[(i - 1) * d..];
        let next = &mut tail[..d];
        let dw = &mut path.increments[(i - 1) * d..i * d];
        local.eval_values(spec, prev)?;
        streams.fill_increment(dt, dw);
        euler_step_local(local, prev, dw, dt, mode, next);
        let p = bridge_probability(spec.level(), local.a11, prev[0], next[0], dt);
        let u = streams.uniform();
        path.probs[i - 1] = p;
        path.uniforms[i - 1] = u;
        path.hits[i - 1] = u <= p;
    }
    Ok(())
}

/// Per-step and cumulative weights of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightLedger {
    pub m: Vec<f64>,
    pub m_bar: Vec<f64>,
    /// Running products, indexed `0..=n`.
    pub big_m: Vec<f64>,
    pub big_m_bar: Vec<f64>,
    pub kappa: Vec<f64>,
    /// Cumulative Girsanov log-weights, indexed `0..=n`.
    pub log_k: Vec<f64>,
}

impl WeightLedger {
    /// Girsanov terms are computed only for driftless paths and are zero otherwise.
    pub fn from_path(
        spec: &ModelSpec,
        path: &EulerPath,
        mode: WeightMode,
        local: &mut LocalCoefficients,
    ) -> Result<Self> {
        let n = path.steps();
        let mut ledger = Self {
            m: Vec::with_capacity(n),
            m_bar: Vec::with_capacity(n),
            big_m: Vec::with_capacity(n + 1),
            big_m_bar: Vec::with_capacity(n + 1),
            kappa: Vec::with_capacity(n),
            log_k: Vec::with_capacity(n + 1),
        };
        ledger.big_m.push(1.0);
        ledger.big_m_bar.push(1.0);
        ledger.log_k.push(0.0);
        for i in 1..=n {
            let dist = spec.distance(path.state(i));
            let (m, mb) = step_weights(dist, path.bridge_prob(i), path.uniform(i), mode);
            ledger.m.push(m);
            ledger.m_bar.push(mb);
            ledger.big_m.push(ledger.big_m[i - 1] * m);
            ledger.big_m_bar.push(ledger.big_m_bar[i - 1] * mb);
            let kappa = match path.mode {
                StepMode::Driftless => {
                    local.eval_values(spec, path.state(i - 1))?;
                    girsanov_log_increment(local, path.increment(i), path.dt)?
                }
                StepMode::Drift => 0.0,
            };
            ledger.kappa.push(kappa);
            ledger.log_k.push(ledger.log_k[i - 1] + kappa);
        }
        Ok(ledger)
    }

    /// `prod_{j > i} m_j`.
    pub fn suffix(&self, i: usize) -> f64 {
        self.m[i..].iter().product()
    }

    /// `exp(sum kappa)`, rejecting overflow.
    pub fn girsanov_weight(&self) -> Result<f64> {
        let total = *self.log_k.last().unwrap_or(&0.0);
        if total.abs() > LOG_WEIGHT_LIMIT {
            return Err(Error::Numeric(format!(
                "Girsanov log-weight {total} overflows"
            )));
        }
        Ok(total.exp())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ValueOptions {
    pub weights: WeightMode,
    pub measure: StepMode,
}

impl Default for ValueOptions {
    fn default() -> Self {
        Self {
            weights: WeightMode::Smoothed,
            measure: StepMode::Drift,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate {
    pub value: f64,
    pub stderr: f64,
    pub paths: u64,
}

/// Scratch buffers for one worker.
pub(crate) struct EulerWorkspace {
    pub local: LocalCoefficients,
    pub path: EulerPath,
}

impl EulerWorkspace {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self {
            local: LocalCoefficients::new(dim),
            path: EulerPath::new(dim, steps),
        }
    }
}

/// `f(X_n) M_n`, times the Girsanov weight under the driftless measure.
pub(crate) fn killed_value_sample(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    x: &[f64],
    opts: ValueOptions,
    streams: &mut PathStreams,
    ws: &mut EulerWorkspace,
) -> Result<f64> {
    simulate_euler_path(spec, x, opts.measure, streams, &mut ws.local, &mut ws.path)?;
    let path = &ws.path;
    let n = path.steps();
    let mut weight = 1.0;
    for i in 1..=n {
        let (m, _) = step_weights(
            spec.distance(path.state(i)),
            path.bridge_prob(i),
            path.uniform(i),
            opts.weights,
        );
        weight *= m;
        if weight == 0.0 {
            return Ok(0.0);
        }
    }
    if opts.measure == StepMode::Driftless {
        let mut log_k = 0.0;
        for i in 1..=n {
            ws.local.eval_values(spec, path.state(i - 1))?;
            log_k += girsanov_log_increment(&ws.local, path.increment(i), path.dt)?;
        }
        if log_k.abs() > LOG_WEIGHT_LIMIT {
            return Err(Error::Numeric(format!(
                "Girsanov log-weight {log_k} overflows"
            )));
        }
        weight *= log_k.exp();
    }
    let fx = f.value(path.state(n));
    if !fx.is_finite() {
        return Err(Error::Data(format!(
            "f is not finite at {:?}",
            path.state(n)
        )));
    }
    Ok(fx * weight)
}

/// Monte Carlo estimate of `E[f(X_T) 1_{tau > T}]` with `plan.steps` Euler steps.
pub fn killed_value_mc(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    x: &[f64],
    plan: &RunPlan,
    opts: ValueOptions,
) -> Result<ValueEstimate> {
    let d = spec.dim();
    let stats = run_paths_with(
        plan,
        1,
        || EulerWorkspace::new(d, plan.steps),
        |ws, index, out| {
            let mut streams = PathStreams::new(plan.seed, index);
            out[0] = killed_value_sample(spec, f, x, opts, &mut streams, ws)?;
            Ok(())
        },
    )?;
    Ok(ValueEstimate {
        value: stats.mean()[0],
        stderr: stats.stderr()[0],
        paths: stats.count(),
    })
}

/// Sample means of the cumulative weights `M_n` and `M_bar_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightMeans {
    pub killing: ValueEstimate,
    pub reflecting: ValueEstimate,
}

/// Estimates `E[M_n]` and `E[M_bar_n]` over `plan.steps` steps from `x`.
pub fn weight_means_mc(
    spec: &ModelSpec,
    x: &[f64],
    plan: &RunPlan,
    weights: WeightMode,
    measure: StepMode,
) -> Result<WeightMeans> {
    let d = spec.dim();
    let stats = run_paths_with(
        plan,
        2,
        || EulerWorkspace::new(d, plan.steps),
        |ws, index, out| {
            let mut streams = PathStreams::new(plan.seed, index);
            simulate_euler_path(spec, x, measure, &mut streams, &mut ws.local, &mut ws.path)?;
            let (mut m, mut mb) = (1.0, 1.0);
            let path = &ws.path;
            for i in 1..=path.steps() {
                let (a, b) = step_weights(
                    spec.distance(path.state(i)),
                    path.bridge_prob(i),
                    path.uniform(i),
                    weights,
                );
                m *= a;
                mb *= b;
            }
            out[0] = m;
            out[1] = mb;
            Ok(())
        },
    )?;
    let (mean, se) = (stats.mean(), stats.stderr());
    let estimate = |j: usize| ValueEstimate {
        value: mean[j],
        stderr: se[j],
        paths: stats.count(),
    };
    Ok(WeightMeans {
        killing: estimate(0),
        reflecting: estimate(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_paths, Workers};
    use crate::functions::{Constant, Linear1};
    use crate::model::{registry_model, ConstantDiffusion};
    use crate::normal::upper_tail;
    use approx::assert_abs_diff_eq;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn identity2() -> ModelSpec {
        ModelSpec::new(
            "identity",
            Arc::new(ConstantDiffusion {
                sigma: DMatrix::identity(2, 2),
            }),
            0.0,
            1.0,
        )
        .unwrap()
    }

    struct UnitDrift;

    impl crate::model::Coefficients for UnitDrift {
        fn dim(&self) -> usize {
            2
        }
        fn drift(&self, _: &[f64], out: &mut nalgebra::DVector<f64>) {
            out[0] = 1.0;
        }
        fn diffusion(&self, _: &[f64], out: &mut DMatrix<f64>) {
            out.fill_with_identity();
        }
        fn drift_jacobian(&self, _: &[f64], _: &mut DMatrix<f64>) {}
        fn diffusion_column_jacobians(&self, _: &[f64], _: &mut [DMatrix<f64>]) {}
    }

    #[test]
    fn euler_step_examples() {
        let y = euler_step(
            &identity2(),
            &[1.0, 0.0],
            &[0.1, -0.2],
            0.1,
            StepMode::Drift,
        )
        .unwrap();
        assert_eq!(y, vec![1.1, -0.2]);

        let drifted = ModelSpec::new("unit", Arc::new(UnitDrift), 0.0, 1.0).unwrap();
        let y = euler_step(&drifted, &[1.0, 0.0], &[0.0, 0.0], 0.1, StepMode::Drift).unwrap();
        assert_abs_diff_eq!(y[0], 1.1, epsilon = 1e-15);
        assert_eq!(y[1], 0.0);
        let y = euler_step(&drifted, &[1.0, 0.0], &[0.0, 0.0], 0.1, StepMode::Driftless).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);

        let intro = registry_model("intro2d", 1.0, 0.0).unwrap();
        let y = euler_step(&intro, &[0.5, 0.0], &[0.1, 0.1], 0.1, StepMode::Driftless).unwrap();
        assert_abs_diff_eq!(y[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(y[1], 0.12, epsilon = 1e-15);
    }

    #[test]
    fn bridge_examples() {
        assert_eq!(bridge_probability(0.0, 1.0, 0.0, 0.5, 0.1), 1.0);
        assert_eq!(bridge_probability(0.0, 1.0, 0.5, -0.1, 0.1), 1.0);
        assert_abs_diff_eq!(
            bridge_probability(0.0, 1.0, 0.2, 0.3, 0.1),
            (-1.2f64).exp(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            bridge_probability(0.0, 1.0, 0.2, 0.3, 0.1),
            0.301194,
            epsilon = 1e-6
        );
        let far = 10.0 * 0.1f64.sqrt();
        assert!(bridge_probability(0.0, 1.0, far, far, 0.1) < 1e-80);

        let spec = registry_model("bm1d", 1.0, 0.0).unwrap();
        assert!(bridge_survival(&spec, &[0.2], &[0.3], 0.0).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(
            step_weights(-0.1, 0.3, 0.9, WeightMode::Bernoulli),
            (0.0, 0.0)
        );
        assert_eq!(
            step_weights(0.0, 0.3, 0.9, WeightMode::Smoothed),
            (0.0, 0.0)
        );
        assert_eq!(
            step_weights(0.5, 0.3, 0.9, WeightMode::Bernoulli),
            (1.0, 1.0)
        );
        assert_eq!(
            step_weights(0.5, 0.3, 0.1, WeightMode::Bernoulli),
            (0.0, 2.0)
        );
        let (m, mb) = step_weights(0.5, 0.3, 0.1, WeightMode::Smoothed);
        assert_abs_diff_eq!(m, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(mb, 1.3, epsilon = 1e-15);
    }

    #[test]
    fn girsanov_examples() {
        let mut local = LocalCoefficients::new(1);
        let flat = registry_model("bm1d", 1.0, 0.0).unwrap();
        local.eval_values(&flat, &[1.0]).unwrap();
        assert_eq!(girsanov_log_increment(&local, &[0.2], 0.1).unwrap(), 0.0);

        let unit = registry_model("bm1d", 1.0, 1.0).unwrap();
        local.eval_values(&unit, &[1.0]).unwrap();
        assert_abs_diff_eq!(
            girsanov_log_increment(&local, &[0.2], 0.1).unwrap(),
            0.15,
            epsilon = 1e-15
        );
    }

    #[test]
    fn exponential_martingale_has_unit_mean() {
        let spec = registry_model("bm1d", 1.0, 0.5).unwrap();
        let plan = RunPlan::new(3, 100_000, 32).with_workers(Workers::Fixed(1));
        let stats = run_paths_with(
            &plan,
            1,
            || EulerWorkspace::new(1, 32),
            |ws, index, out| {
                let mut streams = PathStreams::new(plan.seed, index);
                simulate_euler_path(
                    &spec,
                    &[1.0],
                    StepMode::Driftless,
                    &mut streams,
                    &mut ws.local,
                    &mut ws.path,
                )?;
                let ledger =
                    WeightLedger::from_path(&spec, &ws.path, WeightMode::Bernoulli, &mut ws.local)?;
                out[0] = ledger.girsanov_weight()?;
                Ok(())
            },
        )
        .unwrap();
        assert!((stats.mean()[0] - 1.0).abs() < 3.0 * stats.stderr()[0]);
    }

    #[test]
    fn path_records_are_consistent() {
        let spec = registry_model("intro2d", 1.0, 0.0).unwrap();
        let mut ws = EulerWorkspace::new(2, 16);
        let mut streams = PathStreams::new(9, 0);
        simulate_euler_path(
            &spec,
            &[0.5, 0.0],
            StepMode::Drift,
            &mut streams,
            &mut ws.local,
            &mut ws.path,
        )
        .unwrap();
        let path = &ws.path;
        for i in 1..=16 {
            let expected = euler_step(
                &spec,
                path.state(i - 1),
                path.increment(i),
                path.dt,
                StepMode::Drift,
            )
            .unwrap();
            assert_eq!(path.state(i), expected.as_slice());
            let p = bridge_survival(&spec, path.state(i - 1), path.state(i), path.dt).unwrap();
            assert_eq!(path.bridge_prob(i), p);
            assert_eq!(path.hit(i), path.uniform(i) <= p);
        }
        let ledger =
            WeightLedger::from_path(&spec, path, WeightMode::Bernoulli, &mut ws.local).unwrap();
        for i in 0..=16 {
            assert!(ledger.big_m[i] == 0.0 || ledger.big_m[i] == 1.0);
            assert!(ledger.big_m_bar[i] == 0.0 || ledger.big_m_bar[i].log2().fract() == 0.0);
        }
        assert_eq!(ledger.suffix(0), ledger.big_m[16]);
    }

    #[test]
    fn one_step_killing_and_reflection_means() {
        let spec = registry_model("bm1d", 1.0, 0.0).unwrap();
        let dt: f64 = 0.01;
        for u in [0.5, 1.0, 2.0] {
            let x = u * dt.sqrt();
            let plan = RunPlan::new(17, 200_000, 1).with_workers(Workers::Fixed(1));
            let stats = run_paths(&plan, 2, |index, out| {
                let mut s = PathStreams::new(plan.seed, index);
                let next = x + s.standard_normal() * dt.sqrt();
                let p = bridge_probability(0.0, 1.0, x, next, dt);
                let (m, mb) = step_weights(
                    spec.distance(&[next]),
                    p,
                    s.uniform(),
                    WeightMode::Bernoulli,
                );
                out[0] = m;
                out[1] = mb;
                Ok(())
            })
            .unwrap();
            let se = stats.stderr();
            assert!((stats.mean()[0] - (upper_tail(-u) - upper_tail(u))).abs() < 3.0 * se[0]);
            assert!((stats.mean()[1] - 1.0).abs() < 3.0 * se[1]);
        }
    }

    #[test]
    fn killed_value_examples() {
        let spec = registry_model("bm1d", 1.0, 0.0).unwrap();
        let plan = RunPlan::new(5, 50_000, 32).with_workers(Workers::Fixed(1));
        let one = killed_value_mc(
            &spec,
            &Constant(1.0),
            &[1.0],
            &plan,
            ValueOptions::default(),
        )
        .unwrap();
        assert!((one.value - 0.682_689_492_137_085_9).abs() < 3.0 * one.stderr);

        let lin = killed_value_mc(
            &spec,
            &Linear1 { level: 0.0 },
            &[1.0],
            &plan,
            ValueOptions::default(),
        )
        .unwrap();
        assert!((lin.value - 1.0).abs() < 3.0 * lin.stderr);

        let zero = killed_value_mc(
            &spec,
            &Constant(0.0),
            &[1.0],
            &plan,
            ValueOptions::default(),
        )
        .unwrap();
        assert_eq!((zero.value, zero.stderr), (0.0, 0.0));
    }

    #[test]
    fn driftless_with_girsanov_matches_drift_mode() {
        let spec = registry_model("bm1d", 1.0, 0.3).unwrap();
        let plan = RunPlan::new(8, 60_000, 16).with_workers(Workers::Fixed(1));
        let f = Linear1 { level: 0.0 };
        let a = killed_value_mc(&spec, &f, &[1.0], &plan, ValueOptions::default()).unwrap();
        let b = killed_value_mc(
            &spec,
            &f,
            &[1.0],
            &plan.clone().with_tag("driftless"),
            ValueOptions {
                weights: WeightMode::Smoothed,
                measure: StepMode::Driftless,
            },
        )
        .unwrap();
        let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 3.0 * se);
    }

    #[test]
    fn smoothing_reduces_variance() {
        let f = Constant(1.0);
        for (name, x) in [
            ("bm1d", vec![0.5]),
            ("bm1d", vec![1.5]),
            ("intro2d", vec![0.5, 0.0]),
        ] {
            let spec = registry_model(name, 1.0, 0.0).unwrap();
            let plan = RunPlan::new(21, 20_000, 16).with_workers(Workers::Fixed(1));
            let smooth = killed_value_mc(&spec, &f, &x, &plan, ValueOptions::default()).unwrap();
            let bern = killed_value_mc(
                &spec,
                &f,
                &x,
                &plan,
                ValueOptions {
                    weights: WeightMode::Bernoulli,
                    measure: StepMode::Drift,
                },
            )
            .unwrap();
            assert!(smooth.stderr <= bern.stderr, "{name} {x:?}");
        }
    }
}
