//! Forward utilities assembled from a solved eBSDE: surfaces `U(t, x)`,
//! optimal strategies, wealth simulation, and the consistency (martingale)
//! check along the optimal wealth.

use crate::drivers::Driver;
use crate::sde::{FactorPath, PathBundle, TimeGrid};
use crate::solvers::SolvedEbsde;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("x = {x} outside the utility domain (x > 0 required)")]
    Domain { x: f64 },
    #[error("utility kind does not match the driver kind")]
    MismatchedKinds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum UtilityKind {
    Log,
    Exp { gamma: f64 },
    Power { delta: f64 },
}

/// Utility family and the wealth grid the surface is evaluated on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilitySpec {
    pub kind: UtilityKind,
    pub x0: f64,
    pub x_grid: Vec<f64>,
}

impl UtilitySpec {
    pub fn new(kind: UtilityKind, x0: f64, x_grid: Vec<f64>) -> Self {
        UtilitySpec { kind, x0, x_grid }
    }

    /// `U(t, x)` given the solution value `y_t` and the ergodic cost.
    pub fn utility(&self, t: f64, x: f64, y_t: f64, lambda: f64) -> Result<f64, UtilityError> {
        let f = y_t - lambda * t;
        match self.kind {
            UtilityKind::Log => {
                if x <= 0.0 {
                    return Err(UtilityError::Domain { x });
                }
                Ok(x.ln() + f)
            }
            UtilityKind::Exp { gamma } => Ok(-(-gamma * x + f).exp()),
            UtilityKind::Power { delta } => {
                if x <= 0.0 {
                    return Err(UtilityError::Domain { x });
                }
                Ok(x.powf(delta) / delta * f.exp())
            }
        }
    }

    /// The initial utility `u0(x) = U(0, x)` implied by the pinned `y0`.
    pub fn u0(&self, x: f64, y0: f64) -> Result<f64, UtilityError> {
        self.utility(0.0, x, y0, 0.0)
    }
}

/// One row of the utility surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub t: f64,
    pub x: f64,
    pub u: f64,
}

/// `U(t, x)` along one factor realization, on the grid times in `[0, T]`
/// crossed with the spec's wealth grid.
pub fn utility_surface(
    sol: &SolvedEbsde,
    spec: &UtilitySpec,
    path: &FactorPath,
    grid: &TimeGrid,
    drv: &Driver,
) -> Result<Vec<SurfacePoint>, UtilityError> {
    let y = sol.y_along_path(path, grid, drv);
    let lambda = sol.lambda();
    let n_t = grid.n_t().min(path.n_ret);
    let mut rows = Vec::with_capacity((n_t + 1) * spec.x_grid.len());
    for i in 0..=n_t {
        let t = i as f64 * grid.h;
        for &x in &spec.x_grid {
            rows.push(SurfacePoint { t, x, u: spec.utility(t, x, y[i], lambda)? });
        }
    }
    Ok(rows)
}

/// The optimal strategy at factor value `v`:
/// log `Proj(theta)`, exponential `Proj((z + theta)/gamma)` (wealth
/// amounts), power `Proj((z + theta)/(1 - delta))`.
pub fn optimal_strategy(
    sol: &SolvedEbsde,
    spec: &UtilitySpec,
    drv: &Driver,
    v: f64,
    time_idx: usize,
) -> Result<Vec<f64>, UtilityError> {
    use crate::drivers::DriverKind;
    match (&spec.kind, &drv.kind) {
        (UtilityKind::Log, DriverKind::Log)
        | (UtilityKind::Exp { .. }, DriverKind::Exp { .. })
        | (UtilityKind::Power { .. }, DriverKind::Power { .. }) => {}
        // The benchmark drivers are allowed as stand-ins in diagnostics.
        (_, DriverKind::Example1 { .. }) | (_, DriverKind::Example2 { .. }) => {}
        _ => return Err(UtilityError::MismatchedKinds),
    }
    let theta = drv.theta_at(v);
    let z_padded = |mut z: Vec<f64>| {
        z.resize(drv.dims, 0.0);
        z
    };
    let raw: Vec<f64> = match spec.kind {
        UtilityKind::Log => theta,
        UtilityKind::Exp { gamma } => {
            let z = z_padded(sol.z_at(v, time_idx));
            theta.iter().zip(&z).map(|(t, zi)| (zi + t) / gamma).collect()
        }
        UtilityKind::Power { delta } => {
            let z = z_padded(sol.z_at(v, time_idx));
            theta.iter().zip(&z).map(|(t, zi)| (zi + t) / (1.0 - delta)).collect()
        }
    };
    Ok(drv.constraint.project(&raw))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WealthMode {
    /// Proportional strategies (log/power): log-Euler keeps wealth positive.
    Proportional,
    /// Wealth amounts (exponential case): plain Euler.
    Amount,
}

/// Wealth along one path under a per-step control.
#[derive(Debug, Clone)]
pub struct WealthPath {
    pub x: Vec<f64>,
    /// Controls per step, step-major.
    pub controls: Vec<f64>,
}

/// Simulates wealth along `path` under `strategy(step, v) -> control`.
pub fn simulate_wealth<F>(
    strategy: F,
    drv: &Driver,
    path: &FactorPath,
    h: f64,
    x0: f64,
    mode: WealthMode,
) -> WealthPath
where
    F: Fn(usize, f64) -> Vec<f64>,
{
    assert!(x0 > 0.0, "initial wealth must be positive");
    let dims = drv.dims;
    let mut x = Vec::with_capacity(path.n_ret + 1);
    let mut controls = Vec::with_capacity(path.n_ret * dims);
    x.push(x0);
    let mut cur = x0;
    for k in 0..path.n_ret {
        let v = path.v[k];
        let pi = strategy(k, v);
        let theta = drv.theta_at(v);
        let dw = path.increments(k, dims);
        let pth: f64 = pi.iter().zip(&theta).map(|(a, b)| a * b).sum();
        let pdw: f64 = pi.iter().zip(dw).map(|(a, b)| a * b).sum();
        match mode {
            WealthMode::Proportional => {
                let pp: f64 = pi.iter().map(|p| p * p).sum();
                cur *= (pth * h - 0.5 * pp * h + pdw).exp();
            }
            WealthMode::Amount => {
                cur += pth * h + pdw;
            }
        }
        controls.extend_from_slice(&pi);
        x.push(cur);
    }
    WealthPath { x, controls }
}

/// Statistical consistency check: `m(t) = mean_j U(t, X_t^j)` along the
/// optimal wealth on `[0, T]`, against `U(0, x0)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub times: Vec<f64>,
    pub mean_utility: Vec<f64>,
    pub u_initial: f64,
    pub max_rel_drift: f64,
}

pub fn martingale_check(
    sol: &SolvedEbsde,
    spec: &UtilitySpec,
    drv: &Driver,
    bundle: &PathBundle,
    x0: f64,
) -> Result<MartingaleReport, UtilityError> {
    let grid = &bundle.grid;
    let n_t = grid.n_t();
    let lambda = sol.lambda();
    let mode = match spec.kind {
        UtilityKind::Exp { .. } => WealthMode::Amount,
        _ => WealthMode::Proportional,
    };
    let mut sums = vec![0.0f64; n_t + 1];
    for path in &bundle.paths {
        let y = sol.y_along_path(path, grid, drv);
        let wealth = simulate_wealth(
            |k, v| optimal_strategy(sol, spec, drv, v, k).expect("kinds checked"),
            drv,
            path,
            grid.h,
            x0,
            mode,
        );
        for i in 0..=n_t {
            let t = i as f64 * grid.h;
            sums[i] += spec.utility(t, wealth.x[i], y[i], lambda)?;
        }
    }
    let m = bundle.n_paths() as f64;
    let mean_utility: Vec<f64> = sums.iter().map(|s| s / m).collect();
    let u_initial = spec.u0(x0, sol.y0())?;
    let max_rel_drift = mean_utility
        .iter()
        .map(|mu| (mu - u_initial).abs() / u_initial.abs())
        .fold(0.0f64, f64::max);
    let times = (0..=n_t).map(|i| i as f64 * grid.h).collect();
    Ok(MartingaleReport { times, mean_utility, u_initial, max_rel_drift })
}
