//! Monte Carlo estimators of the ergodic cost over the random horizon:
//! the ratio estimator for z-free drivers, the linear representation for the
//! unconstrained exponential case, and the Cole-Hopf root-find for purely
//! quadratic generators.
//!
//! The adjoint weight is simulated with exact log-increments
//! `ln G_{k+1} = ln G_k + (drift - ||a||^2/2) h + a^T dW`, which keeps it
//! positive and mean-consistent. The cost parameter enters the drift
//! linearly, so `G(lambda) = G(0) e^{-lambda beta tau}` and the root of
//! `mean G(lambda) = 1` is found on a reduced `(ln G(0), tau)` sample
//! without re-simulation.

use crate::drivers::{Driver, RiskPremium};
use crate::rng::derive_seed;
use crate::sde::{simulate_paths, FactorModel, PathBundle, SdeError, TimeGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("the ratio estimator requires a z-free driver")]
    DriverDependsOnZ,
    #[error("root not bracketed on [-K, K] = [{lo}, {hi}]: g({lo}) = {g_lo}, g({hi}) = {g_hi}")]
    RootNotBracketed { lo: f64, hi: f64, g_lo: f64, g_hi: f64 },
    #[error("estimate {value} exceeds the driver bound K = {k}")]
    EstimateOutOfBound { value: f64, k: f64 },
    #[error(transparent)]
    Sde(#[from] SdeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorMethod {
    Ratio,
    LinearExp,
    ColeHopf,
}

/// An ergodic cost estimate with repetition statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LambdaEstimate {
    /// Mean over repetitions.
    pub value: f64,
    /// Sample variance over repetitions (0 for a single repetition).
    pub variance: f64,
    /// Per-repetition values.
    pub values: Vec<f64>,
    pub n_paths: usize,
    pub h: f64,
    pub method: EstimatorMethod,
    /// Wall-clock seconds.
    pub runtime: f64,
}

/// Pooled ratio estimate for a z-free driver:
/// sum of the Riemann sums of `F` over the sum of return times.
pub fn lambda_ratio(drv: &Driver, paths: &PathBundle) -> Result<f64, EstimatorError> {
    if drv.depends_on_z() {
        return Err(EstimatorError::DriverDependsOnZ);
    }
    let h = paths.grid.h;
    let zero = vec![0.0; drv.dims];
    let sums: Vec<(f64, f64)> = paths
        .paths
        .par_iter()
        .map(|p| {
            let mut num = 0.0;
            for k in 0..p.n_ret {
                num += h * drv.eval(p.v[k], &zero);
            }
            (num, h * p.n_ret as f64)
        })
        .collect();
    let (num, den) = sums.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    Ok(num / den)
}

/// Linear-representation estimate for the unconstrained exponential driver:
/// `lambda = (E[y0 G_tau - 1/2 int G ||theta||^2 ds] - y0) / E[int G ds]`
/// with `dG = -G theta(V)^T dW`.
pub fn lambda_linear_exp(theta: &RiskPremium, paths: &PathBundle, y0: f64) -> f64 {
    let h = paths.grid.h;
    let dims = paths.dims;
    let stats: Vec<(f64, f64, f64)> = paths
        .paths
        .par_iter()
        .map(|p| {
            let mut th = vec![0.0; dims];
            let mut ln_g = 0.0f64;
            let mut int_g = 0.0;
            let mut int_g_theta = 0.0;
            for k in 0..p.n_ret {
                theta.eval_into(p.v[k], &mut th);
                let tt: f64 = th.iter().map(|t| t * t).sum();
                let g = ln_g.exp();
                int_g += g * h;
                int_g_theta += g * tt * h;
                let dw = p.increments(k, dims);
                let tdw: f64 = th.iter().zip(dw).map(|(a, b)| a * b).sum();
                ln_g += -tdw - 0.5 * tt * h;
            }
            (ln_g.exp(), int_g, int_g_theta)
        })
        .collect();
    let m = stats.len() as f64;
    let (mut e_gt, mut e_int_g, mut e_int_gt) = (0.0, 0.0, 0.0);
    for (gt, ig, igt) in &stats {
        e_gt += gt;
        e_int_g += ig;
        e_int_gt += igt;
    }
    e_gt /= m;
    e_int_g /= m;
    e_int_gt /= m;
    (y0 * e_gt - 0.5 * e_int_gt - y0) / e_int_g
}

/// Reduced per-path sample for the Cole-Hopf root-find:
/// `ln G(0)` and the return time.
#[derive(Debug, Clone)]
pub struct GammaSample {
    pub ln_g0: Vec<f64>,
    pub tau: Vec<f64>,
    pub beta: f64,
}

impl GammaSample {
    /// Simulates `ln G(0)` for the generator `l(v) + a(v)^T z + beta/2 |z|^2`
    /// along each path.
    pub fn simulate<L, A>(beta: f64, l: L, a: A, paths: &PathBundle) -> Self
    where
        L: Fn(f64) -> f64 + Sync,
        A: Fn(f64, &mut [f64]) + Sync,
    {
        let h = paths.grid.h;
        let dims = paths.dims;
        let per_path: Vec<(f64, f64)> = paths
            .paths
            .par_iter()
            .map(|p| {
                let mut av = vec![0.0; dims];
                let mut ln_g = 0.0f64;
                for k in 0..p.n_ret {
                    let v = p.v[k];
                    a(v, &mut av);
                    let aa: f64 = av.iter().map(|x| x * x).sum();
                    let dw = p.increments(k, dims);
                    let adw: f64 = av.iter().zip(dw).map(|(x, d)| x * d).sum();
                    ln_g += (beta * l(v) - 0.5 * aa) * h + adw;
                }
                (ln_g, h * p.n_ret as f64)
            })
            .collect();
        GammaSample {
            ln_g0: per_path.iter().map(|x| x.0).collect(),
            tau: per_path.iter().map(|x| x.1).collect(),
            beta,
        }
    }

    /// `G(lambda)` for each path via the analytic factorization.
    pub fn gamma_at(&self, lambda: f64) -> impl Iterator<Item = f64> + '_ {
        self.ln_g0
            .iter()
            .zip(&self.tau)
            .map(move |(lg, t)| (lg - lambda * self.beta * t).exp())
    }

    /// `g(lambda) = mean G(lambda) - 1` and its derivative.
    pub fn g_and_deriv(&self, lambda: f64) -> (f64, f64) {
        let m = self.ln_g0.len() as f64;
        let mut g = 0.0;
        let mut dg = 0.0;
        for (lg, t) in self.ln_g0.iter().zip(&self.tau) {
            let gamma = (lg - lambda * self.beta * t).exp();
            g += gamma;
            dg -= gamma * self.beta * t;
        }
        (g / m - 1.0, dg / m)
    }

    /// Mean of `G(lambda)` with its standard error.
    pub fn mean_and_se(&self, lambda: f64) -> (f64, f64) {
        let m = self.ln_g0.len() as f64;
        let vals: Vec<f64> = self.gamma_at(lambda).collect();
        let mean = vals.iter().sum::<f64>() / m;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0);
        (mean, (var / m).sqrt())
    }
}

/// Cole-Hopf estimate for a quadratic generator `l + a^T z + beta/2 |z|^2`:
/// the root of `mean G(lambda) = 1` on `[-k_bound, k_bound]`.
pub fn lambda_colehopf_general<L, A>(
    beta: f64,
    l: L,
    a: A,
    paths: &PathBundle,
    k_bound: f64,
) -> Result<f64, EstimatorError>
where
    L: Fn(f64) -> f64 + Sync,
    A: Fn(f64, &mut [f64]) + Sync,
{
    assert!(beta != 0.0, "beta must be nonzero");
    let sample = GammaSample::simulate(beta, l, a, paths);
    solve_root(&sample, k_bound)
}

/// Cole-Hopf estimate for the unconstrained power driver
/// `delta/(2(1-delta)) |theta + z|^2 + |z|^2/2`; specializes the general
/// transform with `beta = 1/(1-delta)`, `l = delta/(2(1-delta)) ||theta||^2`
/// and `a = delta/(1-delta) theta`.
pub fn lambda_colehopf_power(
    delta: f64,
    theta: &RiskPremium,
    paths: &PathBundle,
    k_bound: f64,
) -> Result<f64, EstimatorError> {
    assert!(0.0 < delta && delta < 1.0, "delta must be in (0,1)");
    let dims = paths.dims;
    let beta = 1.0 / (1.0 - delta);
    let coef = delta / (2.0 * (1.0 - delta));
    let scale = delta / (1.0 - delta);
    let l = move |v: f64| {
        let mut th = vec![0.0; dims];
        theta.eval_into(v, &mut th);
        coef * th.iter().map(|t| t * t).sum::<f64>()
    };
    let a = move |v: f64, out: &mut [f64]| {
        theta.eval_into(v, out);
        for x in out.iter_mut() {
            *x *= scale;
        }
    };
    lambda_colehopf_general(beta, l, a, paths, k_bound)
}

/// Newton from 0 with analytic derivative; falls back to bisection when the
/// derivative degenerates or the iteration stalls. `g` is strictly
/// decreasing in `lambda` (for `beta > 0`), so a sign check on the interval
/// ends detects an unbracketable root.
fn solve_root(sample: &GammaSample, k_bound: f64) -> Result<f64, EstimatorError> {
    let (g_lo, _) = sample.g_and_deriv(-k_bound);
    let (g_hi, _) = sample.g_and_deriv(k_bound);
    if g_lo * g_hi > 0.0 {
        return Err(EstimatorError::RootNotBracketed {
            lo: -k_bound,
            hi: k_bound,
            g_lo,
            g_hi,
        });
    }
    let mut lambda = 0.0f64;
    for _ in 0..50 {
        let (g, dg) = sample.g_and_deriv(lambda);
        if g.abs() < 1e-14 {
            return Ok(lambda);
        }
        if dg.abs() < 1e-14 {
            break;
        }
        let next = (lambda - g / dg).clamp(-k_bound, k_bound);
        if (next - lambda).abs() < 1e-15 * (1.0 + lambda.abs()) {
            return Ok(next);
        }
        lambda = next;
    }
    Ok(bisect_root(sample, -k_bound, k_bound))
}

/// Bisection for `mean G(lambda) = 1`, assuming `g` decreasing on `[lo, hi]`.
fn bisect_root(sample: &GammaSample, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        let (g, _) = sample.g_and_deriv(mid);
        if g > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Estimator selection for the repetition wrapper.
#[derive(Debug, Clone)]
pub enum LambdaMethod {
    Ratio { driver: Driver },
    LinearExp { theta: RiskPremium, y0: f64 },
    ColeHopfPower { delta: f64, theta: RiskPremium, k_bound: f64 },
}

impl LambdaMethod {
    pub fn kind(&self) -> EstimatorMethod {
        match self {
            LambdaMethod::Ratio { .. } => EstimatorMethod::Ratio,
            LambdaMethod::LinearExp { .. } => EstimatorMethod::LinearExp,
            LambdaMethod::ColeHopfPower { .. } => EstimatorMethod::ColeHopf,
        }
    }

    fn run(&self, paths: &PathBundle) -> Result<f64, EstimatorError> {
        match self {
            LambdaMethod::Ratio { driver } => lambda_ratio(driver, paths),
            LambdaMethod::LinearExp { theta, y0 } => Ok(lambda_linear_exp(theta, paths, *y0)),
            LambdaMethod::ColeHopfPower { delta, theta, k_bound } => {
                lambda_colehopf_power(*delta, theta, paths, *k_bound)
            }
        }
    }

    fn k_bound(&self) -> Option<f64> {
        match self {
            LambdaMethod::ColeHopfPower { k_bound, .. } => Some(*k_bound),
            _ => None,
        }
    }
}

/// Runs `reps` independent repetitions of `m_paths` paths each and reports
/// the mean and sample variance of the per-repetition estimates.
pub fn estimate_lambda(
    method: &LambdaMethod,
    model: &FactorModel,
    grid: &TimeGrid,
    m_paths: usize,
    reps: usize,
    seed: u64,
) -> Result<LambdaEstimate, EstimatorError> {
    assert!(reps >= 1);
    let start = std::time::Instant::now();
    let mut values = Vec::with_capacity(reps);
    for rep in 0..reps {
        let bundle = simulate_paths(model, grid, m_paths, derive_seed(seed, rep as u64))?;
        values.push(method.run(&bundle)?);
    }
    let mean = values.iter().sum::<f64>() / reps as f64;
    let variance = if reps > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps as f64 - 1.0)
    } else {
        0.0
    };
    if let Some(k) = method.k_bound() {
        if mean.abs() > k + 1e-9 {
            return Err(EstimatorError::EstimateOutOfBound { value: mean, k });
        }
    }
    Ok(LambdaEstimate {
        value: mean,
        variance,
        values,
        n_paths: m_paths,
        h: grid.h,
        method: method.kind(),
        runtime: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drivers::{ConvexSet, DriverKind};

    fn table_model() -> FactorModel {
        // Parameters shared by the two benchmark tables.
        FactorModel::ou(2.0, vec![2.0], 0.5).unwrap()
    }

    #[test]
    fn ratio_rejects_z_dependent_drivers() {
        let drv = Driver::new(
            DriverKind::Power { delta: 0.5 },
            ConvexSet::Full,
            RiskPremium::TruncatedLinear { slope: 0.8, bound: 3.0 },
            1,
        )
        .unwrap();
        let grid = TimeGrid::new(0.05, 1.0).unwrap();
        let bundle = simulate_paths(&table_model(), &grid, 8, 1).unwrap();
        assert!(matches!(lambda_ratio(&drv, &bundle), Err(EstimatorError::DriverDependsOnZ)));
    }

    #[test]
    fn ratio_is_exact_for_constant_drivers() {
        // Log driver with constant theta and no constraint: F = ||c||^2 / 2.
        let drv = Driver::new(
            DriverKind::Log,
            ConvexSet::Full,
            RiskPremium::Constant(vec![1.2]),
            1,
        )
        .unwrap();
        let grid = TimeGrid::new(0.03, 1.0).unwrap();
        for seed in [1u64, 2, 3] {
            let bundle = simulate_paths(&table_model(), &grid, 16, seed).unwrap();
            let lam = lambda_ratio(&drv, &bundle).unwrap();
            assert!((lam - 0.72).abs() < 1e-12, "{lam}");
        }
    }

    #[test]
    fn ratio_example1_near_zero() {
        let grid = TimeGrid::new(0.01, 1.0).unwrap();
        let est = estimate_lambda(
            &LambdaMethod::Ratio { driver: Driver::example1(1.0) },
            &table_model(),
            &grid,
            20_000,
            5,
            11,
        )
        .unwrap();
        let mean_abs: f64 =
            est.values.iter().map(|v| v.abs()).sum::<f64>() / est.values.len() as f64;
        assert!(mean_abs < 0.012, "mean abs err {mean_abs}");
        assert!(est.variance >= 0.0);
    }

    #[test]
    fn ratio_example2_matches_exact_lambda() {
        let grid = TimeGrid::new(0.01, 1.0).unwrap();
        let est = estimate_lambda(
            &LambdaMethod::Ratio { driver: Driver::example2(1.0) },
            &table_model(),
            &grid,
            20_000,
            5,
            13,
        )
        .unwrap();
        assert!((est.value - 0.398942).abs() < 5e-3, "{}", est.value);
    }

    #[test]
    fn linear_exp_zero_theta_gives_zero() {
        let theta = RiskPremium::Constant(vec![0.0]);
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&table_model(), &grid, 64, 4).unwrap();
        let lam = lambda_linear_exp(&theta, &bundle, 3.7);
        assert!(lam.abs() < 1e-12, "{lam}");
    }

    #[test]
    fn linear_exp_gamma_stays_positive_and_matches_tight_h_oracle() {
        let model = FactorModel::ou(3.0, vec![1.3], 0.0).unwrap();
        let theta = RiskPremium::TruncatedLinear { slope: 0.8, bound: 3.0 };
        let grid = TimeGrid::new(0.01, 1.0).unwrap();
        let bundle = simulate_paths(&model, &grid, 20_000, 21).unwrap();
        let lam = lambda_linear_exp(&theta, &bundle, 0.0);
        assert!(lam < 0.0 && lam.is_finite());

        // Independent oracle: naive-Euler adjoint at h = 0.001, ratio form
        // E[int G (-||theta||^2/2) ds] / E[int G ds].
        let grid_fine = TimeGrid::new(0.001, 1.0).unwrap();
        let fine = simulate_paths(&model, &grid_fine, 20_000, 22).unwrap();
        let h = grid_fine.h;
        let mut num = 0.0;
        let mut den = 0.0;
        for p in &fine.paths {
            let mut g = 1.0f64;
            for k in 0..p.n_ret {
                let th = (0.8 * p.v[k]).clamp(-3.0, 3.0);
                num += g * (-0.5 * th * th) * h;
                den += g * h;
                g *= 1.0 - th * p.dw[k];
                assert!(g > 0.0, "adjoint lost positivity in the oracle");
            }
        }
        let oracle = num / den;
        assert!((lam - oracle).abs() < 0.01, "lambda {lam} vs oracle {oracle}");
    }

    #[test]
    fn linear_exp_initial_value_cancels() {
        // E[y0 G_tau] - y0 = y0 (E[G_tau] - 1) ~ 0: the estimate is
        // insensitive to y0 up to Monte Carlo noise.
        let model = FactorModel::ou(3.0, vec![1.3], 0.0).unwrap();
        let theta = RiskPremium::TruncatedLinear { slope: 0.8, bound: 3.0 };
        let grid = TimeGrid::new(0.01, 1.0).unwrap();
        let bundle = simulate_paths(&model, &grid, 50_000, 31).unwrap();
        let l0 = lambda_linear_exp(&theta, &bundle, 0.0);
        let l5 = lambda_linear_exp(&theta, &bundle, 5.0);
        assert!((l0 - l5).abs() < 0.02, "{l0} vs {l5}");
    }

    fn power_theta() -> RiskPremium {
        RiskPremium::TruncatedLinear { slope: 0.8, bound: 3.0 }
    }

    fn power_model() -> FactorModel {
        FactorModel::ou(3.0, vec![1.3], 0.0).unwrap()
    }

    #[test]
    fn colehopf_power_vanishes_with_delta() {
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&power_model(), &grid, 2_000, 41).unwrap();
        let lam = lambda_colehopf_power(1e-8, &power_theta(), &bundle, 4.5).unwrap();
        assert!(lam.abs() < 1e-6, "{lam}");
    }

    #[test]
    fn colehopf_power_equals_general_specialization_bitwise() {
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&power_model(), &grid, 2_000, 42).unwrap();
        let delta = 0.5;
        let spec = lambda_colehopf_power(delta, &power_theta(), &bundle, 4.5).unwrap();
        let beta = 1.0 / (1.0 - delta);
        let th = power_theta();
        let gen = lambda_colehopf_general(
            beta,
            |v| {
                let mut t = [0.0];
                th.eval_into(v, &mut t);
                delta / (2.0 * (1.0 - delta)) * t[0] * t[0]
            },
            |v, out: &mut [f64]| {
                th.eval_into(v, out);
                out[0] *= delta / (1.0 - delta);
            },
            &bundle,
            4.5,
        )
        .unwrap();
        assert_eq!(spec.to_bits(), gen.to_bits());
    }

    #[test]
    fn colehopf_constant_driver_root_is_exact() {
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&power_model(), &grid, 500, 43).unwrap();
        let c = 0.31;
        let lam =
            lambda_colehopf_general(2.0, |_| c, |_, out: &mut [f64]| out.fill(0.0), &bundle, 4.5)
                .unwrap();
        assert!((lam - c).abs() < 1e-12, "{lam}");
    }

    #[test]
    fn g_is_strictly_decreasing_in_lambda() {
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&power_model(), &grid, 1_000, 44).unwrap();
        let th = power_theta();
        let sample = GammaSample::simulate(
            2.0,
            |v| {
                let mut t = [0.0];
                th.eval_into(v, &mut t);
                t[0] * t[0]
            },
            |v, out: &mut [f64]| th.eval_into(v, out),
            &bundle,
        );
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let lam = -2.0 + 0.2 * i as f64;
            let (g, dg) = sample.g_and_deriv(lam);
            assert!(g < prev);
            assert!(dg < 0.0);
            prev = g;
        }
    }

    #[test]
    fn newton_and_bisection_agree() {
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&power_model(), &grid, 5_000, 45).unwrap();
        let th = power_theta();
        let delta = 0.5;
        let beta = 1.0 / (1.0 - delta);
        let sample = GammaSample::simulate(
            beta,
            |v| {
                let mut t = [0.0];
                th.eval_into(v, &mut t);
                delta / (2.0 * (1.0 - delta)) * t[0] * t[0]
            },
            |v, out: &mut [f64]| {
                th.eval_into(v, out);
                out[0] *= delta / (1.0 - delta);
            },
            &bundle,
        );
        let newton = solve_root(&sample, 4.5).unwrap();
        let bisect = bisect_root(&sample, -4.5, 4.5);
        assert!((newton - bisect).abs() < 1e-10, "{newton} vs {bisect}");
    }

    #[test]
    fn golden_section_oracle_matches_root() {
        // Random bounded l and a on a small sample; golden-section
        // minimization of |mean G - 1| as an independent optimizer.
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&power_model(), &grid, 400, 46).unwrap();
        let l = |v: f64| 0.3 * (v).sin() + 0.1;
        let a = |v: f64, out: &mut [f64]| out[0] = 0.5 * (2.0 * v).cos();
        let sample = GammaSample::simulate(1.5, l, a, &bundle);
        let root = solve_root(&sample, 4.5).unwrap();

        let obj = |lam: f64| {
            let (g, _) = sample.g_and_deriv(lam);
            g.abs()
        };
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        let (mut lo, mut hi) = (-4.5f64, 4.5f64);
        let mut x1 = hi - phi * (hi - lo);
        let mut x2 = lo + phi * (hi - lo);
        let (mut f1, mut f2) = (obj(x1), obj(x2));
        for _ in 0..200 {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - phi * (hi - lo);
                f1 = obj(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + phi * (hi - lo);
                f2 = obj(x2);
            }
        }
        let golden = 0.5 * (lo + hi);
        assert!((root - golden).abs() < 1e-8, "{root} vs {golden}");
    }

    #[test]
    fn root_not_bracketed_detected() {
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let bundle = simulate_paths(&power_model(), &grid, 100, 47).unwrap();
        // Constant driver with c = 0.31 but K = 0.1 < c: no root inside.
        let err =
            lambda_colehopf_general(2.0, |_| 0.31, |_, out: &mut [f64]| out.fill(0.0), &bundle, 0.1)
                .unwrap_err();
        assert!(matches!(err, EstimatorError::RootNotBracketed { .. }));
    }

    #[test]
    fn gamma_martingale_at_estimated_lambda_on_fresh_sample() {
        let grid = TimeGrid::new(0.02, 1.0).unwrap();
        let th = power_theta();
        let delta = 0.5;
        let bundle = simulate_paths(&power_model(), &grid, 20_000, 48).unwrap();
        let lam = lambda_colehopf_power(delta, &th, &bundle, 4.5).unwrap();

        let fresh = simulate_paths(&power_model(), &grid, 20_000, 49).unwrap();
        let beta = 1.0 / (1.0 - delta);
        let sample = GammaSample::simulate(
            beta,
            |v| {
                let mut t = [0.0];
                th.eval_into(v, &mut t);
                delta / (2.0 * (1.0 - delta)) * t[0] * t[0]
            },
            |v, out: &mut [f64]| {
                th.eval_into(v, out);
                out[0] *= delta / (1.0 - delta);
            },
            &fresh,
        );
        let (mean, se) = sample.mean_and_se(lam);
        assert!((mean - 1.0).abs() <= 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn ratio_lambda_weak_martingale_check_small_beta() {
        // For z-free drivers the transform linearizes as beta -> 0:
        // mean G(lambda_hat) - 1 ~ beta (E int F - lambda_hat E tau).
        let grid = TimeGrid::new(0.01, 1.0).unwrap();
        let drv = Driver::example2(1.0);
        let bundle = simulate_paths(&table_model(), &grid, 20_000, 50).unwrap();
        let lam = lambda_ratio(&drv, &bundle).unwrap();
        let fresh = simulate_paths(&table_model(), &grid, 20_000, 51).unwrap();
        let zero = [0.0];
        let sample = GammaSample::simulate(
            0.05,
            |v| drv.eval(v, &zero),
            |_, out: &mut [f64]| out.fill(0.0),
            &fresh,
        );
        let (mean, se) = sample.mean_and_se(lam);
        assert!((mean - 1.0).abs() <= 3.0 * se + 1e-3, "mean {mean}, se {se}");
    }

    #[test]
    fn repetition_wrapper_reports_variance_and_runtime() {
        let grid = TimeGrid::new(0.05, 1.0).unwrap();
        let est = estimate_lambda(
            &LambdaMethod::Ratio { driver: Driver::example2(1.0) },
            &table_model(),
            &grid,
            1_000,
            10,
            60,
        )
        .unwrap();
        assert_eq!(est.values.len(), 10);
        assert!(est.variance > 0.0);
        assert!(est.runtime > 0.0);
        assert_eq!(est.method, EstimatorMethod::Ratio);
    }
}
