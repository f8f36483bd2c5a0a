//! Seeding, substream derivation, parallel path execution and streaming
//! statistics shared by every estimator.
//!
//! Every path owns its random numbers: a path index and a channel select a
//! ChaCha stream under the run seed, so a path draws the same numbers no matter
//! which worker executes it. Paths are grouped into fixed-size chunks, each
//! chunk is accumulated sequentially, and chunk accumulators are merged in chunk
//! order. Results are therefore bitwise identical for any worker count.

use crate::error::{Error, Result};
use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Environment variable overriding [`RunPlan::workers`].
pub const WORKERS_ENV: &str = "HALFGRAD_WORKERS";

/// Paths per scheduling unit.
pub const CHUNK_PATHS: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Gaussian = 0,
    Uniform = 1,
    Bump = 2,
    Auxiliary = 3,
}

/// Deterministic stream keyed by `(seed, path_index, channel)`.
///
/// Streams are distinct for every `path_index < 2^62`.
pub fn derive_substream(seed: u64, path_index: u64, channel: Channel) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((path_index << 2) | channel as u64);
    rng
}

/// The Gaussian and uniform streams consumed by one simulated path.
pub struct PathStreams {
    gaussian: ChaCha8Rng,
    uniform: ChaCha8Rng,
}

impl PathStreams {
    pub fn new(seed: u64, path_index: u64) -> Self {
        Self {
            gaussian: derive_substream(seed, path_index, Channel::Gaussian),
            uniform: derive_substream(seed, path_index, Channel::Uniform),
        }
    }

    /// Streams on the bump and auxiliary channels, independent of those
    /// returned by [`PathStreams::new`] for the same key.
    pub fn independent(seed: u64, path_index: u64) -> Self {
        Self {
            gaussian: derive_substream(seed, path_index, Channel::Bump),
            uniform: derive_substream(seed, path_index, Channel::Auxiliary),
        }
    }

    /// Fills `out` with independent `N(0, dt)` components.
    pub fn fill_increment(&mut self, dt: f64, out: &mut [f64]) {
        let scale = dt.sqrt();
        for v in out.iter_mut() {
            let z: f64 = self.gaussian.sample(StandardNormal);
            *v = scale * z;
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.gaussian.sample(StandardNormal)
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.uniform.sample(Open01)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workers {
    Auto,
    Fixed(usize),
}

impl Workers {
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Some(Workers::Auto);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&w| w >= 1)
            .map(Workers::Fixed)
    }
}

#[derive(Debug, Clone)]
pub struct RunPlan {
    pub seed: u64,
    pub paths: u64,
    pub steps: usize,
    pub workers: Workers,
    pub estimator_tag: String,
}

impl RunPlan {
    pub fn new(seed: u64, paths: u64, steps: usize) -> Self {
        Self {
            seed,
            paths,
            steps,
            workers: Workers::Auto,
            estimator_tag: String::new(),
        }
    }

    pub fn with_workers(mut self, workers: Workers) -> Self {
        self.workers = workers;
        self
    }

    pub fn with_tag(mut self, tag: &str) -> Self {
        self.estimator_tag = tag.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.paths < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 paths, got {}",
                self.paths
            )));
        }
        if self.steps < 1 {
            return Err(Error::Contract("need at least 1 time step".into()));
        }
        Ok(())
    }

    /// Worker count after applying the `HALFGRAD_WORKERS` override.
    pub fn resolved_workers(&self) -> usize {
        let requested = std::env::var(WORKERS_ENV)
            .ok()
            .and_then(|v| Workers::parse(&v))
            .unwrap_or(self.workers);
        match requested {
            Workers::Fixed(w) => w,
            Workers::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// Streaming per-component mean and second central moment.
#[derive(Debug, Clone, PartialEq)]
pub struct StatAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
    min: Vec<f64>,
    max: Vec<f64>,
}

impl StatAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, sample: &[f64]) {
        debug_assert_eq!(sample.len(), self.dim());
        self.count += 1;
        let n = self.count as f64;
        for (j, &x) in sample.iter().enumerate() {
            let delta = x - self.mean[j];
            self.mean[j] += delta / n;
            self.m2[j] += delta * (x - self.mean[j]);
            self.min[j] = self.min[j].min(x);
            self.max[j] = self.max[j].max(x);
        }
    }

    /// Pairwise merge; the result depends only on the operand order.
    pub fn merge(&mut self, other: &StatAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        for j in 0..self.dim() {
            let delta = other.mean[j] - self.mean[j];
            self.mean[j] += delta * nb / n;
            self.m2[j] += other.m2[j] + delta * delta * na * nb / n;
            self.min[j] = self.min[j].min(other.min[j]);
            self.max[j] = self.max[j].max(other.max[j]);
        }
        self.count += other.count;
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased sample variance per component.
    pub fn variance(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.dim()];
        }
        let denom = (self.count - 1) as f64;
        self.m2.iter().map(|m| m / denom).collect()
    }

    /// `sqrt(M2 / (count (count - 1)))` per component.
    pub fn stderr(&self) -> Vec<f64> {
        if self.count < 2 {
            return vec![0.0; self.dim()];
        }
        let c = self.count as f64;
        self.m2
            .iter()
            .map(|m| (m.max(0.0) / (c * (c - 1.0))).sqrt())
            .collect()
    }

    pub fn min(&self) -> &[f64] {
        &self.min
    }

    pub fn max(&self) -> &[f64] {
        &self.max
    }
}

/// Runs `per_path` for every index in `0..plan.paths` and reduces the
/// `dim`-component samples in path-index order.
pub fn run_paths<F>(plan: &RunPlan, dim: usize, per_path: F) -> Result<StatAccumulator>
where
    F: Fn(u64, &mut [f64]) -> Result<()> + Sync,
{
    run_paths_with(plan, dim, || (), |_, index, out| per_path(index, out))
}

/// Like [`run_paths`], with a scratch workspace built once per chunk by `init`
/// and handed to every path of that chunk.
pub fn run_paths_with<W, I, F>(
    plan: &RunPlan,
    dim: usize,
    init: I,
    per_path: F,
) -> Result<StatAccumulator>
where
    I: Fn() -> W + Sync,
    F: Fn(&mut W, u64, &mut [f64]) -> Result<()> + Sync,
{
    plan.validate()?;
    let chunks = plan.paths.div_ceil(CHUNK_PATHS);
    let run_chunk = |c: u64| -> Result<StatAccumulator> {
        let start = c * CHUNK_PATHS;
        let end = (start + CHUNK_PATHS).min(plan.paths);
        let mut acc = StatAccumulator::new(dim);
        let mut buf = vec![0.0; dim];
        let mut work = init();
        for index in start..end {
            buf.iter_mut().for_each(|v| *v = 0.0);
            per_path(&mut work, index, &mut buf).map_err(|e| e.at_path(index))?;
            acc.push(&buf);
        }
        Ok(acc)
    };

    let parts = execute_chunks(plan.resolved_workers(), chunks, run_chunk)?;
    let mut total = StatAccumulator::new(dim);
    for part in parts {
        total.merge(&part?);
    }
    Ok(total)
}

#[cfg(feature = "parallel")]
fn execute_chunks<T, F>(workers: usize, chunks: u64, run_chunk: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> T + Sync,
{
    if workers <= 1 {
        return Ok((0..chunks).map(run_chunk).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Numeric(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(|| (0..chunks).into_par_iter().map(&run_chunk).collect()))
}

#[cfg(not(feature = "parallel"))]
fn execute_chunks<T, F>(_workers: usize, chunks: u64, run_chunk: F) -> Result<Vec<T>>
where
    F: Fn(u64) -> T,
{
    Ok((0..chunks).map(run_chunk).collect())
}

/// Pairs an accumulated run with its plan metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEstimate {
    pub estimate: Vec<f64>,
    pub stderr: Vec<f64>,
    pub paths: u64,
    pub seed: u64,
    pub estimator_tag: String,
}

impl GradEstimate {
    pub fn from_stats(plan: &RunPlan, stats: &StatAccumulator) -> Self {
        Self {
            estimate: stats.mean().to_vec(),
            stderr: stats.stderr(),
            paths: stats.count(),
            seed: plan.seed,
            estimator_tag: plan.estimator_tag.clone(),
        }
    }

    /// `|self - other| / sqrt(se_self^2 + se_other^2)` per component.
    pub fn z_scores(&self, other: &GradEstimate) -> Vec<f64> {
        self.estimate
            .iter()
            .zip(&other.estimate)
            .zip(self.stderr.iter().zip(&other.stderr))
            .map(|((a, b), (sa, sb))| combined_z(a - b, (sa * sa + sb * sb).sqrt()))
            .collect()
    }
}

/// `|diff| / se`, with an exact match counting as zero even when `se == 0`.
pub fn combined_z(diff: f64, se: f64) -> f64 {
    if diff == 0.0 {
        0.0
    } else if se == 0.0 {
        f64::INFINITY
    } else {
        diff.abs() / se
    }
}
