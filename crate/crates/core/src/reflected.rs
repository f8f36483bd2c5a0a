//! Normally reflected Euler paths with predictable local-time increments.

use crate::engine::PathStreams;
use crate::error::{Error, Result};
use crate::killed::{bridge_probability, euler_step_local, StepMode};
use crate::model::{LocalCoefficients, ModelSpec};
use crate::normal::{density, upper_tail};
use nalgebra::DVector;

/// Folds the Euler proposal `z` back into the half-space.
///
/// Returns whether the step touched the boundary: either the proposal left
/// the half-space or the bridge between `y_prev` and the folded endpoint was
/// sampled to touch it. `local` must be evaluated at `y_prev`.
pub fn reflected_step_local(
    local: &LocalCoefficients,
    level: f64,
    y_prev: &[f64],
    dw: &[f64],
    u: f64,
    dt: f64,
    mode: StepMode,
    out: &mut [f64],
) -> bool {
    euler_step_local(local, y_prev, dw, dt, mode, out);
    let crossed = out[0] <= level;
    out[0] = level + (out[0] - level).abs();
    crossed || u <= bridge_probability(level, local.a11, y_prev[0], out[0], dt)
}

pub fn reflected_step(
    spec: &ModelSpec,
    y_prev: &[f64],
    dw: &[f64],
    u: f64,
    dt: f64,
    mode: StepMode,
) -> Result<(Vec<f64>, bool)> {
    if spec.distance(y_prev) < 0.0 {
        return Err(Error::Contract(format!(
            "{y_prev:?} lies outside the half-space"
        )));
    }
    let mut local = LocalCoefficients::new(spec.dim());
    local.eval_values(spec, y_prev)?;
    let mut out = vec![0.0; y_prev.len()];
    let hit = reflected_step_local(&local, spec.level(), y_prev, dw, u, dt, mode, &mut out);
    Ok((out, hit))
}

/// Predictable local-time increment for a step starting at distance `dist`.
pub fn local_time_increment_at(dist: f64, a11: f64, dt: f64) -> f64 {
    let s = (a11 * dt).sqrt();
    let u = dist / s;
    (2.0 * s / a11 * (density(u) - u * upper_tail(u))).max(0.0)
}

pub fn local_time_increment(spec: &ModelSpec, y_prev: &[f64], dt: f64) -> Result<f64> {
    if dt <= 0.0 || spec.distance(y_prev) < 0.0 {
        return Err(Error::Contract(
            "need dt > 0 and a start point in the half-space".into(),
        ));
    }
    let a11 = spec.diffusion_at(y_prev).row(0).norm_squared();
    Ok(local_time_increment_at(spec.distance(y_prev), a11, dt))
}

/// `a(y_prev) e1 dB`.
pub fn vector_local_time_increment(
    spec: &ModelSpec,
    y_prev: &[f64],
    dt: f64,
) -> Result<DVector<f64>> {
    let db = local_time_increment(spec, y_prev, dt)?;
    let s = spec.diffusion_at(y_prev);
    Ok(&s * s.row(0).transpose() * db)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflectedPath {
    dim: usize,
    steps: usize,
    pub dt: f64,
    states: Vec<f64>,
    increments: Vec<f64>,
    local_time: Vec<f64>,
    cumulative: Vec<f64>,
    hits: Vec<bool>,
}

impl ReflectedPath {
    pub fn new(dim: usize, steps: usize) -> Self {
        Self {
            dim,
            steps,
            dt: 0.0,
            states: vec![0.0; (steps + 1) * dim],
            increments: vec![0.0; steps * dim],
            local_time: vec![0.0; steps],
            cumulative: vec![0.0; steps + 1],
            hits: vec![false; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn increment(&self, i: usize) -> &[f64] {
        &self.increments[(i - 1) * self.dim..i * self.dim]
    }

    pub fn local_time_increment(&self, i: usize) -> f64 {
        self.local_time[i - 1]
    }

    pub fn local_time(&self, i: usize) -> f64 {
        self.cumulative[i]
    }

    pub fn hit(&self, i: usize) -> bool {
        self.hits[i - 1]
    }

    pub fn first_hit_step(&self) -> Option<usize> {
        self.hits.iter().position(|&h| h).map(|k| k + 1)
    }

    pub fn last_hit_step(&self) -> Option<usize> {
        self.hits.iter().rposition(|&h| h).map(|k| k + 1)
    }
}

/// First and last grid times carrying a hit flag.
pub fn hit_times(path: &ReflectedPath) -> (Option<f64>, Option<f64>) {
    let t = |k: usize| k as f64 * path.dt;
    (path.first_hit_step().map(t), path.last_hit_step().map(t))
}

/// Simulates a reflected path over the model horizon, checking that every
/// state stays in the closed half-space and every local-time increment is
/// nonnegative.
pub fn simulate_reflected_path(
    spec: &ModelSpec,
    y0: &[f64],
    mode: StepMode,
    streams: &mut PathStreams,
    local: &mut LocalCoefficients,
    path: &mut ReflectedPath,
) -> Result<()> {
    let d = spec.dim();
    if y0.len() != d || path.dim != d {
        return Err(Error::Contract(format!(
            "expected a point of dimension {d}"
        )));
    }
    if spec.distance(y0) < 0.0 {
        return Err(Error::Contract(format!(
            "{y0:?} lies outside the half-space"
        )));
    }
    let n = path.steps;
    let dt = spec.horizon() / n as f64;
    let level = spec.level();
    path.dt = dt;
    path.states[..d].copy_from_slice(y0);
    for i in 1..=n {
        let (head, tail) = path.states.split_at_mut(i * d);
        let prev = &head[(i - 1) * d..];
        let next = &mut tail[..d];
        let dw = &mut path.increments[(i - 1) * d..i * d];
        local.eval_values(spec, prev)?;
        streams.fill_increment(dt, dw);
        let db = local_time_increment_at(prev[0] - level, local.a11, dt);
        let u = streams.uniform();
        let hit = reflected_step_local(local, level, prev, dw, u, dt, mode, next);
        if !(next[0] >= level) {
            return Err(Error::Invariant(format!(
                "state {next:?} left the half-space at step {i}"
            )));
        }
        if !(db >= 0.0) {
            return Err(Error::Invariant(format!(
                "negative local-time increment {db} at step {i}"
            )));
        }
        path.local_time[i - 1] = db;
        path.cumulative[i] = path.cumulative[i - 1] + db;
        path.hits[i - 1] = hit;
    }
    Ok(())
}
