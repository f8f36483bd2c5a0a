//! Independent reference values: method-of-images quadrature, exact
//! reflected endpoints, brute-force Brownian bridges and finite differences.

use crate::engine::{run_paths, run_paths_with, GradEstimate, PathStreams, RunPlan};
use crate::error::{Error, Result};
use crate::functions::ScalarField;
use crate::killed::{killed_value_sample, EulerWorkspace, ValueOptions};
use crate::model::ModelSpec;
use crate::normal::gaussian_density;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadratureConfig {
    /// Initial number of trapezoid panels, doubled until convergence.
    pub node_count: usize,
    /// Integration reaches this many standard deviations past the start point.
    pub truncation: f64,
    pub tolerance: f64,
    pub max_doublings: u32,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self {
            node_count: 64,
            truncation: 8.0,
            tolerance: 1e-10,
            max_doublings: 18,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    /// Difference between the last two extrapolated refinements.
    pub refinement_gap: f64,
    pub nodes: usize,
}

/// Trapezoid rule with node doubling and Richardson extrapolation.
fn integrate(g: impl Fn(f64) -> f64, lo: f64, hi: f64, q: &QuadratureConfig) -> Result<Quadrature> {
    if q.node_count < 64 {
        return Err(Error::Contract(format!(
            "quadrature needs at least 64 nodes, got {}",
            q.node_count
        )));
    }
    let mut n = q.node_count;
    let mut h = (hi - lo) / n as f64;
    let mut sum = 0.5 * (g(lo) + g(hi)) + (1..n).map(|i| g(lo + i as f64 * h)).sum::<f64>();
    let mut trap = sum * h;
    let mut extrapolated: Option<f64> = None;
    for _ in 0..q.max_doublings {
        sum += (0..n).map(|i| g(lo + (i as f64 + 0.5) * h)).sum::<f64>();
        n *= 2;
        h *= 0.5;
        let refined = sum * h;
        let richardson = (4.0 * refined - trap) / 3.0;
        trap = refined;
        if let Some(prev) = extrapolated {
            let gap = (richardson - prev).abs();
            if gap < q.tolerance {
                return Ok(Quadrature {
                    value: richardson,
                    refinement_gap: gap,
                    nodes: n + 1,
                });
            }
        }
        extrapolated = Some(richardson);
    }
    Err(Error::Numeric(format!(
        "quadrature did not converge with {} nodes",
        n + 1
    )))
}

fn check_kernel_inputs(a11: f64, level: f64, x: f64, horizon: f64) -> Result<()> {
    if !(a11 > 0.0 && horizon > 0.0 && x > level) {
        return Err(Error::Contract(format!(
            "need a11 > 0, T > 0 and x > L (got a11={a11}, T={horizon}, x={x}, L={level})"
        )));
    }
    Ok(())
}

fn upper_limit(a11: f64, level: f64, x: f64, horizon: f64, q: &QuadratureConfig) -> f64 {
    level + (x - level).abs() + q.truncation * (a11 * horizon).sqrt()
}

/// `int_L^inf f(y) [g(y - x) - g(y + x - 2L)] dy` for the `N(0, a11 T)` density `g`.
pub fn images_value(
    a11: f64,
    level: f64,
    x: f64,
    horizon: f64,
    f: &dyn Fn(f64) -> f64,
    q: &QuadratureConfig,
) -> Result<Quadrature> {
    check_kernel_inputs(a11, level, x, horizon)?;
    let v = a11 * horizon;
    let kernel =
        |y: f64| f(y) * (gaussian_density(y - x, v) - gaussian_density(y + x - 2.0 * level, v));
    integrate(kernel, level, upper_limit(a11, level, x, horizon, q), q)
}

/// Derivative of [`images_value`] in `x`.
pub fn images_gradient(
    a11: f64,
    level: f64,
    x: f64,
    horizon: f64,
    f: &dyn Fn(f64) -> f64,
    q: &QuadratureConfig,
) -> Result<Quadrature> {
    check_kernel_inputs(a11, level, x, horizon)?;
    let v = a11 * horizon;
    let kernel = |y: f64| {
        let (r, s) = (y - x, y + x - 2.0 * level);
        f(y) * (gaussian_density(r, v) * r + gaussian_density(s, v) * s) / v
    };
    integrate(kernel, level, upper_limit(a11, level, x, horizon, q), q)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub lhs_stderr: f64,
    pub rhs_stderr: f64,
}

impl IdentityCheck {
    pub fn combined_stderr(&self) -> f64 {
        self.lhs_stderr.hypot(self.rhs_stderr)
    }
}

/// Compares `E f(reflected endpoint)` with the weighted free endpoint
/// `E[f(U) 1_{U > L} (1 + exp(-2 (U - L)(x - L) / (a11 T)))]`, using
/// independent draws for the two sides.
pub fn reflected_identity_check(
    a11: f64,
    level: f64,
    x: f64,
    horizon: f64,
    f: &(dyn Fn(f64) -> f64 + Sync),
    plan: &RunPlan,
) -> Result<IdentityCheck> {
    if !(a11 > 0.0 && horizon > 0.0 && x >= level) {
        return Err(Error::Contract("need a11 > 0, T > 0 and x >= L".into()));
    }
    let s = (a11 * horizon).sqrt();
    let stats = run_paths(plan, 2, |index, out| {
        let mut a = PathStreams::new(plan.seed, index);
        let mut b = PathStreams::independent(plan.seed, index);
        out[0] = f(level + (x - level + s * a.standard_normal()).abs());
        let u = x + s * b.standard_normal();
        out[1] = if u > level {
            f(u) * (1.0 + (-2.0 * (u - level) * (x - level) / (a11 * horizon)).exp())
        } else {
            0.0
        };
        Ok(())
    })?;
    let se = stats.stderr();
    Ok(IdentityCheck {
        lhs: stats.mean()[0],
        rhs: stats.mean()[1],
        lhs_stderr: se[0],
        rhs_stderr: se[1],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeEstimate {
    pub prob: f64,
    pub stderr: f64,
}

/// Fraction of exactly sampled Brownian bridges from `prev` to `next` over
/// `dt` whose value at one of `substeps` equally spaced nodes is `<= level`.
pub fn crossing_prob_bruteforce(
    a11: f64,
    level: f64,
    prev: f64,
    next: f64,
    dt: f64,
    substeps: usize,
    plan: &RunPlan,
) -> Result<BridgeEstimate> {
    if substeps < 100 {
        return Err(Error::Contract(format!(
            "need at least 100 substeps, got {substeps}"
        )));
    }
    if prev <= level || next <= level {
        return Ok(BridgeEstimate {
            prob: 1.0,
            stderr: 0.0,
        });
    }
    let delta = dt / substeps as f64;
    let stats = run_paths(plan, 1, |index, out| {
        let mut s = PathStreams::new(plan.seed, index);
        let mut v = prev;
        for j in 0..substeps - 1 {
            let remaining = dt - j as f64 * delta;
            let mean = v + (next - v) * delta / remaining;
            let var = a11 * delta * (remaining - delta) / remaining;
            v = mean + var.sqrt() * s.standard_normal();
            if v <= level {
                out[0] = 1.0;
                return Ok(());
            }
        }
        Ok(())
    })?;
    Ok(BridgeEstimate {
        prob: stats.mean()[0],
        stderr: stats.stderr()[0],
    })
}

/// Continuity-correction constant `-zeta(1/2) / sqrt(2 pi)` for discretely
/// monitored Brownian minima.
pub const DISCRETE_MONITORING_SHIFT: f64 = 0.5826;

/// Expected downward bias of [`crossing_prob_bruteforce`]: the gap between the
/// continuous crossing probability and the one with the barrier shifted by
/// `0.5826 sqrt(a11 dt / substeps)`.
pub fn bridge_discreteness_allowance(
    a11: f64,
    level: f64,
    prev: f64,
    next: f64,
    dt: f64,
    substeps: usize,
) -> f64 {
    if prev <= level || next <= level {
        return 0.0;
    }
    let shift = DISCRETE_MONITORING_SHIFT * (a11 * dt / substeps as f64).sqrt();
    let (a, b) = (prev - level, next - level);
    let exact = (-2.0 * a * b / (a11 * dt)).exp();
    let shifted = (-2.0 * (a + shift) * (b + shift) / (a11 * dt)).exp();
    exact - shifted
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BumpStreams {
    /// Both bumps reuse the same path streams.
    Common,
    /// The downward bump draws from an independent stream.
    Independent,
}

/// Central differences of the smoothed killed-value estimator in every coordinate.
pub fn finite_difference_gradient(
    spec: &ModelSpec,
    f: &dyn ScalarField,
    x: &[f64],
    plan: &RunPlan,
    bump: f64,
    streams: BumpStreams,
) -> Result<GradEstimate> {
    let d = spec.dim();
    if x.len() != d {
        return Err(Error::Contract(format!(
            "expected a point of dimension {d}"
        )));
    }
    if !(bump > 0.0) || spec.distance(x) - bump <= 0.0 {
        return Err(Error::Contract(format!(
            "bump {bump} must be positive and keep x inside the half-space"
        )));
    }
    let opts = ValueOptions::default();
    let stats = run_paths_with(
        plan,
        d,
        || (EulerWorkspace::new(d, plan.steps), x.to_vec()),
        |(ws, y), index, out| {
            for j in 0..d {
                y.copy_from_slice(x);
                y[j] = x[j] + bump;
                let up = killed_value_sample(
                    spec,
                    f,
                    y,
                    opts,
                    &mut PathStreams::new(plan.seed, index),
                    ws,
                )?;
                y[j] = x[j] - bump;
                let mut down_streams = match streams {
                    BumpStreams::Common => PathStreams::new(plan.seed, index),
                    BumpStreams::Independent => PathStreams::independent(plan.seed, index),
                };
                let down = killed_value_sample(spec, f, y, opts, &mut down_streams, ws)?;
                out[j] = (up - down) / (2.0 * bump);
            }
            Ok(())
        },
    )?;
    Ok(GradEstimate::from_stats(plan, &stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Workers;
    use crate::functions::{Constant, Linear1};
    use crate::model::registry_model;
    use crate::normal::density;
    use approx::assert_abs_diff_eq;

    const EXPSAT_GRADIENT: f64 = 0.405_224_347_426_180_7;

    #[test]
    fn images_value_examples() {
        let q = QuadratureConfig::default();
        let one = images_value(1.0, 0.0, 1.0, 1.0, &|_| 1.0, &q).unwrap();
        assert_abs_diff_eq!(one.value, 0.682_689_492_137_085_9, epsilon = 1e-9);
        let lin = images_value(1.0, 0.0, 1.0, 1.0, &|y| y, &q).unwrap();
        assert_abs_diff_eq!(lin.value, 1.0, epsilon = 1e-9);
        let near = images_value(1.0, 0.0, 1e-6, 1.0, &|_| 1.0, &q).unwrap();
        assert!(near.value < 1e-5);
        assert!(images_value(1.0, 0.0, 0.0, 1.0, &|_| 1.0, &q).is_err());
    }

    #[test]
    fn images_gradient_examples() {
        let q = QuadratureConfig::default();
        let one = images_gradient(1.0, 0.0, 1.0, 1.0, &|_| 1.0, &q).unwrap();
        assert_abs_diff_eq!(one.value, 2.0 * density(1.0), epsilon = 1e-9);
        let lin = images_gradient(1.0, 0.0, 1.0, 1.0, &|y| y, &q).unwrap();
        assert_abs_diff_eq!(lin.value, 1.0, epsilon = 1e-9);
        let sat = images_gradient(1.0, 0.0, 1.0, 1.0, &|y: f64| -(-y).exp_m1(), &q).unwrap();
        assert_abs_diff_eq!(sat.value, EXPSAT_GRADIENT, epsilon = 1e-9);
        assert!(sat.refinement_gap < 1e-8);
    }

    #[test]
    fn images_gradient_matches_differenced_values() {
        let q = QuadratureConfig::default();
        let f = |y: f64| y * y * (-(y - 2.0)).exp().min(5.0);
        let h = 1e-4;
        for (a11, level, x) in [(1.0, 0.0, 0.7), (2.5, -1.0, 0.3), (0.5, 0.4, 2.0)] {
            let up = images_value(a11, level, x + h, 0.8, &f, &q).unwrap().value;
            let dn = images_value(a11, level, x - h, 0.8, &f, &q).unwrap().value;
            let g = images_gradient(a11, level, x, 0.8, &f, &q).unwrap().value;
            assert_abs_diff_eq!(g, (up - dn) / (2.0 * h), epsilon = 1e-6);
        }
    }

    #[test]
    fn too_few_nodes_is_rejected() {
        let q = QuadratureConfig {
            node_count: 10,
            ..QuadratureConfig::default()
        };
        assert!(matches!(
            images_value(1.0, 0.0, 1.0, 1.0, &|_| 1.0, &q),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn reflected_identity_examples() {
        let plan = RunPlan::new(31, 200_000, 1).with_workers(Workers::Fixed(1));
        let one = reflected_identity_check(1.0, 0.0, 0.7, 1.0, &|_| 1.0, &plan).unwrap();
        assert_eq!(one.lhs, 1.0);
        assert!((one.rhs - 1.0).abs() < 3.0 * one.rhs_stderr);

        let lin = reflected_identity_check(1.0, 0.0, 0.0, 1.0, &|y| y, &plan).unwrap();
        let target = (2.0 / std::f64::consts::PI).sqrt();
        assert!((lin.lhs - target).abs() < 3.0 * lin.lhs_stderr);
        assert!((lin.rhs - target).abs() < 3.0 * lin.rhs_stderr);

        let sq = reflected_identity_check(1.0, 0.0, 1.0, 1.0, &|y| y * y, &plan).unwrap();
        assert!((sq.lhs - sq.rhs).abs() < 3.0 * sq.combined_stderr());
    }

    #[test]
    fn bruteforce_bridge_examples() {
        let plan = RunPlan::new(41, 20_000, 1).with_workers(Workers::Fixed(1));
        let at = crossing_prob_bruteforce(1.0, 0.0, 0.0, 0.3, 0.1, 100, &plan).unwrap();
        assert_eq!(
            at,
            BridgeEstimate {
                prob: 1.0,
                stderr: 0.0
            }
        );

        let est = crossing_prob_bruteforce(1.0, 0.0, 0.2, 0.2, 0.1, 1000, &plan).unwrap();
        let p = (-0.8f64).exp();
        let allowance = bridge_discreteness_allowance(1.0, 0.0, 0.2, 0.2, 0.1, 1000);
        assert!(allowance > 0.0);
        assert!(
            (est.prob - p).abs() < 3.0 * est.stderr + allowance,
            "{est:?}"
        );

        let far = 10.0 * 0.1f64.sqrt();
        let est = crossing_prob_bruteforce(1.0, 0.0, far, far, 0.1, 100, &plan).unwrap();
        assert_eq!(est.prob, 0.0);

        assert!(crossing_prob_bruteforce(1.0, 0.0, 0.2, 0.2, 0.1, 99, &plan).is_err());
    }

    #[test]
    fn finer_monitoring_catches_more_crossings() {
        let plan = RunPlan::new(43, 20_000, 1).with_workers(Workers::Fixed(1));
        let runs: Vec<BridgeEstimate> = [100, 1000, 10_000]
            .iter()
            .map(|&m| crossing_prob_bruteforce(1.0, 0.0, 0.15, 0.25, 0.1, m, &plan).unwrap())
            .collect();
        let p = (-2.0 * 0.15 * 0.25 / 0.1f64).exp();
        for w in runs.windows(2) {
            assert!(
                w[0].prob <= w[1].prob + 3.0 * w[0].stderr.hypot(w[1].stderr),
                "{runs:?}"
            );
        }
        assert!(runs[2].prob <= p + 3.0 * runs[2].stderr);
        assert!(runs[0].prob < runs[2].prob);
    }

    #[test]
    fn finite_difference_examples() {
        let spec = registry_model("bm1d", 1.0, 0.0).unwrap();
        let plan = RunPlan::new(47, 20_000, 16).with_workers(Workers::Fixed(1));
        let zero = finite_difference_gradient(
            &spec,
            &Constant(0.0),
            &[1.0],
            &plan,
            0.01,
            BumpStreams::Common,
        )
        .unwrap();
        assert_eq!(zero.estimate, vec![0.0]);

        let lin = finite_difference_gradient(
            &spec,
            &Linear1 { level: 0.0 },
            &[1.0],
            &plan,
            0.01,
            BumpStreams::Common,
        )
        .unwrap();
        assert!(
            (lin.estimate[0] - 1.0).abs() < 3.0 * lin.stderr[0],
            "{lin:?}"
        );

        assert!(matches!(
            finite_difference_gradient(
                &spec,
                &Constant(0.0),
                &[1.0],
                &plan,
                1.5,
                BumpStreams::Common
            ),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn common_numbers_shrink_the_error_bar() {
        let spec = registry_model("bm1d", 1.0, 0.0).unwrap();
        let plan = RunPlan::new(53, 20_000, 16).with_workers(Workers::Fixed(1));
        let f = crate::functions::ExpSat { level: 0.0 };
        let crn = finite_difference_gradient(&spec, &f, &[1.0], &plan, 0.05, BumpStreams::Common)
            .unwrap();
        let ind =
            finite_difference_gradient(&spec, &f, &[1.0], &plan, 0.05, BumpStreams::Independent)
                .unwrap();
        assert!(5.0 * crn.stderr[0] < ind.stderr[0], "{crn:?} {ind:?}");
    }

    #[test]
    fn far_from_the_boundary_differences_match_the_pathwise_jacobian() {
        let spec = registry_model("diag2d", 0.5, 0.0).unwrap();
        let x = [6.0, 0.2];
        let plan = RunPlan::new(59, 20_000, 16).with_workers(Workers::Fixed(1));
        let f = Linear1 { level: 0.0 };
        let fd =
            finite_difference_gradient(&spec, &f, &x, &plan, 0.01, BumpStreams::Common).unwrap();
        let pw =
            crate::pushforward::grad_killed_pushforward(&spec, &f, &x, &plan, Default::default())
                .unwrap();
        for j in 0..2 {
            let se = fd.stderr[j].hypot(pw.stderr[j]);
            assert!(
                (fd.estimate[j] - pw.estimate[j]).abs() <= 3.0 * se + 1e-9,
                "{fd:?} {pw:?}"
            );
        }
    }
}
