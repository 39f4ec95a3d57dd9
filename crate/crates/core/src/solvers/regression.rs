//! Least-squares Monte Carlo backward scheme over the random horizon:
//! starting from `Y = y0` at each path's return index,
//! `Z_i = (1/h) E[Y_{i+1} dW_i | V_i]` and
//! `Y_i = E[Y_{i+1} | V_i] + h (F(V_i, Z_i) - lambda)`,
//! with the conditional expectations realized as ridge-regularized
//! polynomial regressions over the paths still alive at `t_i`. Paths are
//! frozen at `y0` after their own return time and `Z` is zero there.

use super::{SolvedEbsde, SolverError};
use crate::drivers::{truncate_z, Driver};
use crate::sde::PathBundle;
use serde::{Deserialize, Serialize};

const RIDGE: f64 = 1e-8;

/// Polynomial fit in the standardized variable `(v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub mean: f64,
    pub scale: f64,
    pub coefs: Vec<f64>,
}

impl PolyFit {
    pub fn eval(&self, v: f64) -> f64 {
        let s = (v - self.mean) / self.scale;
        let mut acc = 0.0;
        for &c in self.coefs.iter().rev() {
            acc = acc * s + c;
        }
        acc
    }
}

/// Per-time coefficient tables for `Y` and `Z`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegressionSolution {
    pub lambda: f64,
    pub y0: f64,
    pub degree: usize,
    /// Fit at time index `i`, `0 <= i < n_times`.
    pub y_fits: Vec<PolyFit>,
    /// `z_fits[i][c]` is coordinate `c` at time index `i`.
    pub z_fits: Vec<Vec<PolyFit>>,
    pub warnings: Vec<String>,
}

impl RegressionSolution {
    pub fn n_times(&self) -> usize {
        self.y_fits.len()
    }

    /// `Y` at time index `i`; frozen at `y0` past the table.
    pub fn y_at(&self, v: f64, i: usize) -> f64 {
        if i < self.y_fits.len() {
            self.y_fits[i].eval(v)
        } else {
            self.y0
        }
    }

    /// `Z` at time index `i`; zero past the table.
    pub fn z_at(&self, v: f64, i: usize) -> Vec<f64> {
        match self.z_fits.get(i) {
            Some(fits) => fits.iter().map(|f| f.eval(v)).collect(),
            None => vec![0.0; self.z_fits.first().map_or(1, Vec::len)],
        }
    }
}

/// The scheme's own discrete process on the fitted paths: `y[j][i]` and
/// `z[j][i*dims..]` for `i = 0..=n_ret(j)`, frozen at `y0` / zero past each
/// path's return index.
#[derive(Debug, Clone)]
pub struct RegressionTrace {
    pub y: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

/// Runs the backward scheme with an externally estimated ergodic cost.
///
/// `z_max` enables the driver truncation `F o phi_{Z_max}` in the `Y`
/// update. When the alive-path count at some time drops below the basis
/// size, the degree is reduced for that time and a warning is recorded.
pub fn backward_regression(
    bundle: &PathBundle,
    drv: &Driver,
    lambda_hat: f64,
    y0: f64,
    degree: usize,
    z_max: Option<f64>,
) -> Result<SolvedEbsde, SolverError> {
    run_regression(bundle, drv, lambda_hat, y0, degree, z_max, false, None).map(|(sol, _)| sol)
}

/// As [`backward_regression`], additionally returning the in-sample process
/// values, which the discretization-error study needs.
pub fn backward_regression_traced(
    bundle: &PathBundle,
    drv: &Driver,
    lambda_hat: f64,
    y0: f64,
    degree: usize,
    z_max: Option<f64>,
) -> Result<(SolvedEbsde, RegressionTrace), SolverError> {
    let (sol, trace) = run_regression(bundle, drv, lambda_hat, y0, degree, z_max, true, None)?;
    Ok((sol, trace.expect("trace requested")))
}

/// As [`backward_regression`] with a per-entry observer
/// `(path, index, y, z)` invoked for every alive path-time, streaming the
/// in-sample process without storing it.
pub fn backward_regression_observed(
    bundle: &PathBundle,
    drv: &Driver,
    lambda_hat: f64,
    y0: f64,
    degree: usize,
    z_max: Option<f64>,
    observer: &mut dyn FnMut(usize, usize, f64, &[f64]),
) -> Result<SolvedEbsde, SolverError> {
    run_regression(bundle, drv, lambda_hat, y0, degree, z_max, false, Some(observer))
        .map(|(sol, _)| sol)
}

#[allow(clippy::too_many_arguments)]
fn run_regression(
    bundle: &PathBundle,
    drv: &Driver,
    lambda_hat: f64,
    y0: f64,
    degree: usize,
    z_max: Option<f64>,
    want_trace: bool,
    mut observer: Option<&mut dyn FnMut(usize, usize, f64, &[f64])>,
) -> Result<(SolvedEbsde, Option<RegressionTrace>), SolverError> {
    let h = bundle.grid.h;
    let dims = bundle.dims;
    let k_max = bundle.max_return_index();
    let n_paths = bundle.n_paths();

    let mut y_cur = vec![y0; n_paths];
    let mut y_fits: Vec<Option<PolyFit>> = vec![None; k_max];
    let mut z_fits: Vec<Option<Vec<PolyFit>>> = vec![None; k_max];
    let mut warnings = Vec::new();
    let mut degree_reduced = false;
    let mut trace = if want_trace {
        Some(RegressionTrace {
            y: bundle.paths.iter().map(|p| vec![y0; p.n_ret + 1]).collect(),
            z: bundle.paths.iter().map(|p| vec![0.0; (p.n_ret + 1) * dims]).collect(),
        })
    } else {
        None
    };

    for i in (0..k_max).rev() {
        let alive: Vec<usize> = (0..n_paths).filter(|&j| bundle.paths[j].n_ret > i).collect();
        if alive.is_empty() {
            continue;
        }
        let deg_i = if alive.len() <= degree {
            if !degree_reduced {
                warnings.push(format!(
                    "alive paths ({}) below basis size at index {i}; degree reduced",
                    alive.len()
                ));
                degree_reduced = true;
            }
            alive.len().saturating_sub(1)
        } else {
            degree
        };

        let xs: Vec<f64> = alive.iter().map(|&j| bundle.paths[j].v[i]).collect();
        let ys: Vec<f64> = alive.iter().map(|&j| y_cur[j]).collect();
        let cond_fit = fit_poly(&xs, &ys, deg_i);

        // Centering the Z target leaves the conditional expectation
        // unchanged (E[c dW | F] = 0) and shrinks its variance.
        let y_bar = ys.iter().sum::<f64>() / ys.len() as f64;
        let mut dim_fits = Vec::with_capacity(dims);
        for c in 0..dims {
            let zs: Vec<f64> = alive
                .iter()
                .map(|&j| {
                    let p = &bundle.paths[j];
                    (y_cur[j] - y_bar) * p.increments(i, dims)[c] / h
                })
                .collect();
            dim_fits.push(fit_poly(&xs, &zs, deg_i));
        }

        for (&j, &x) in alive.iter().zip(&xs) {
            let cond = cond_fit.eval(x);
            let z: Vec<f64> = dim_fits.iter().map(|f| f.eval(x)).collect();
            let z_used = match z_max {
                Some(zm) => truncate_z(&z, zm),
                None => z.clone(),
            };
            y_cur[j] = cond + h * (drv.eval(x, &z_used) - lambda_hat);
            if let Some(tr) = trace.as_mut() {
                tr.y[j][i] = y_cur[j];
                tr.z[j][i * dims..(i + 1) * dims].copy_from_slice(&z);
            }
            if let Some(obs) = observer.as_mut() {
                obs(j, i, y_cur[j], &z);
            }
        }
        // The stored Y table is the process itself (conditional expectation
        // plus the driver increment), refit on the same basis.
        let y_vals: Vec<f64> = alive.iter().map(|&j| y_cur[j]).collect();
        y_fits[i] = Some(fit_poly(&xs, &y_vals, deg_i));
        z_fits[i] = Some(dim_fits);
    }

    let y_fits = y_fits.into_iter().map(|f| f.expect("every index below k_max is fit")).collect();
    let z_fits = z_fits.into_iter().map(|f| f.expect("every index below k_max is fit")).collect();
    let sol = SolvedEbsde::Regression(RegressionSolution {
        lambda: lambda_hat,
        y0,
        degree,
        y_fits,
        z_fits,
        warnings,
    });
    Ok((sol, trace))
}

/// Ridge-regularized least squares on standardized monomials.
fn fit_poly(xs: &[f64], ys: &[f64], degree: usize) -> PolyFit {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = if var.sqrt() > 1e-9 { var.sqrt() } else { 1.0 };

    let m = degree + 1;
    let mut gram = vec![0.0f64; m * m];
    let mut rhs = vec![0.0f64; m];
    let mut basis = vec![0.0f64; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let s = (x - mean) / scale;
        basis[0] = 1.0;
        for p in 1..m {
            basis[p] = basis[p - 1] * s;
        }
        for r in 0..m {
            rhs[r] += basis[r] * y;
            for c in 0..m {
                gram[r * m + c] += basis[r] * basis[c];
            }
        }
    }
    for d in 0..m {
        gram[d * m + d] += RIDGE;
    }
    let coefs = cholesky_solve(&mut gram, &mut rhs, m);
    PolyFit { mean, scale, coefs }
}

/// In-place Cholesky solve of the (ridge-regularized, hence positive
/// definite) normal equations.
fn cholesky_solve(a: &mut [f64], b: &mut [f64], n: usize) -> Vec<f64> {
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                a[i * n + i] = sum.max(1e-300).sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= a[i * n + k] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in i + 1..n {
            sum -= a[k * n + i] * b[k];
        }
        b[i] = sum / a[i * n + i];
    }
    b.to_vec()
}
