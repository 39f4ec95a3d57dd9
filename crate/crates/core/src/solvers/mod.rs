//! The three eBSDE solution schemes over the random horizon: a global-loss
//! neural solver, a locally additive neural solver, and a least-squares
//! Monte Carlo backward scheme. All consume [`PathBundle`]s and produce
//! comparable [`SolvedEbsde`] objects.

mod gebsde;
mod laebsde;
mod regression;

pub use gebsde::{gebsde_loss, gebsde_loss_and_grads, gebsde_train};
pub use laebsde::{laebsde_local_loss_at, laebsde_loss, laebsde_loss_and_grads, laebsde_train};
pub use regression::{
    backward_regression, backward_regression_observed, backward_regression_traced, PolyFit,
    RegressionSolution, RegressionTrace,
};

use crate::drivers::{Driver, DriverError};
use crate::nn::Mlp;
use crate::oracles::{OracleError, OracleSolution};
use crate::sde::{FactorModel, FactorPath, PathBundle, SdeError, TimeGrid};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("checkpoint i/o: {0}")]
    CheckpointIo(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    CheckpointFormat(#[from] serde_json::Error),
    #[error("unsupported checkpoint kind {0}")]
    CheckpointKind(String),
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Configuration shared by both neural solvers.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub driver: Driver,
    pub model: FactorModel,
    pub grid: TimeGrid,
    /// Batch size B.
    pub batch: usize,
    /// Number of gradient steps M.
    pub grad_steps: usize,
    /// Initial Adam learning rate.
    pub lr: f64,
    pub seed: u64,
    /// Pinned initial value of the solution.
    pub y0: f64,
    /// Held-out evaluation batch (defaults to 100 B).
    pub eval_batch: usize,
    /// Evaluate the held-out loss every this many steps (0 disables).
    pub eval_every: usize,
    /// Resample a fresh batch every gradient step instead of training on the
    /// pre-sampled one.
    pub resample: bool,
    /// Apply the driver truncation `F o phi_{Z_max}` inside the recursion.
    pub truncate_z: bool,
    /// Clamp bound for the trainable ergodic cost.
    pub k_bound: f64,
    /// Halve the learning rate every 2500 steps.
    pub lr_decay: bool,
}

impl SolverConfig {
    pub fn new(driver: Driver, model: FactorModel, grid: TimeGrid, batch: usize) -> Self {
        let k_bound = driver.sup_f0();
        SolverConfig {
            driver,
            model,
            grid,
            batch,
            grad_steps: 1000,
            lr: 3e-4,
            seed: 0,
            y0: 0.0,
            eval_batch: 100 * batch,
            eval_every: 500,
            resample: false,
            truncate_z: false,
            k_bound,
            lr_decay: false,
        }
    }

    /// Z truncation radius when enabled; `None` when the bound is
    /// unavailable or truncation is off.
    pub(crate) fn z_max(&self) -> Option<f64> {
        if !self.truncate_z {
            return None;
        }
        self.driver.bounds(&self.model).ok().map(|b| b.z_max)
    }
}

/// One training-log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub lambda_bar: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
    pub runtime: f64,
}

/// A solved eBSDE in one of the scheme-specific representations.
#[derive(Debug, Clone)]
pub enum SolvedEbsde {
    Gebsde { z_net: Mlp, lambda: f64, y0: f64, seed: u64, step: u64 },
    Laebsde { y_net: Mlp, z_net: Mlp, lambda: f64, y0: f64, seed: u64, step: u64 },
    Regression(RegressionSolution),
    /// Closed-form solution injected for diagnostics and baselines.
    Analytic { oracle: OracleSolution, y0: f64 },
}

impl SolvedEbsde {
    pub fn lambda(&self) -> f64 {
        match self {
            SolvedEbsde::Gebsde { lambda, .. } | SolvedEbsde::Laebsde { lambda, .. } => *lambda,
            SolvedEbsde::Regression(r) => r.lambda,
            SolvedEbsde::Analytic { oracle, .. } => oracle.lambda,
        }
    }

    pub fn y0(&self) -> f64 {
        match self {
            SolvedEbsde::Gebsde { y0, .. }
            | SolvedEbsde::Laebsde { y0, .. }
            | SolvedEbsde::Analytic { y0, .. } => *y0,
            SolvedEbsde::Regression(r) => r.y0,
        }
    }

    /// `z(v)` at a given time index (the index only matters for the
    /// regression representation, whose coefficients are per-time).
    pub fn z_at(&self, v: f64, time_idx: usize) -> Vec<f64> {
        match self {
            SolvedEbsde::Gebsde { z_net, .. } | SolvedEbsde::Laebsde { z_net, .. } => {
                z_net.forward(v)
            }
            SolvedEbsde::Regression(r) => r.z_at(v, time_idx),
            SolvedEbsde::Analytic { oracle, .. } => oracle.z(v),
        }
    }

    /// The scheme's `Y` values along one path, on indices `0..=n_ret`.
    ///
    /// Global scheme: the forward recursion driven by the trained `z`.
    /// Locally additive scheme: the trained `Y` network.
    /// Regression: the per-time polynomial tables.
    /// Analytic: the closed form shifted to the pinned initial value.
    pub fn y_along_path(&self, path: &FactorPath, grid: &TimeGrid, drv: &Driver) -> Vec<f64> {
        let h = grid.h;
        let dims = drv.dims;
        match self {
            SolvedEbsde::Gebsde { z_net, lambda, y0, .. } => {
                let mut out = Vec::with_capacity(path.n_ret + 1);
                let mut y = *y0;
                out.push(y);
                for k in 0..path.n_ret {
                    let z = z_net.forward(path.v[k]);
                    let dw = path.increments(k, dims);
                    let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
                    y += -h * drv.eval(path.v[k], &z) + lambda * h + zdw;
                    out.push(y);
                }
                out
            }
            SolvedEbsde::Laebsde { y_net, .. } => {
                path.v.iter().map(|&v| y_net.forward(v)[0]).collect()
            }
            SolvedEbsde::Regression(r) => {
                (0..=path.n_ret).map(|i| r.y_at(path.v[i.min(path.n_ret)], i)).collect()
            }
            SolvedEbsde::Analytic { oracle, y0 } => {
                let offset = y0 - oracle.y(path.v[0]);
                path.v.iter().map(|&v| oracle.y(v) + offset).collect()
            }
        }
    }
}

/// Per-time and integral errors of a solution against an oracle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Mean relative absolute error on Y at each grid time in `[0, T]`.
    pub eps_y: Vec<f64>,
    /// `E[sum_i h |y - Y|]` on `[0, T]`.
    pub int_y: f64,
    /// `E[sum_i h ||z - Z||^2]` on `[0, T]`.
    pub int_z: f64,
    pub lambda_abs_err: f64,
    /// Entries skipped because the oracle `y` was below 1e-10 in magnitude.
    pub near_zero_excluded: usize,
}

/// Evaluates a solved eBSDE against the oracle on fresh paths.
pub fn evaluate(
    sol: &SolvedEbsde,
    oracle: &OracleSolution,
    bundle: &PathBundle,
    drv: &Driver,
    model: &FactorModel,
) -> Result<EvalReport, SolverError> {
    oracle.check_model(model)?;
    let grid = &bundle.grid;
    let n_t = grid.n_t();
    let h = grid.h;
    // The oracle is pinned to the same initial value as the solution.
    let offset = sol.y0() - oracle.y(model.v0);

    let mut eps_num = vec![0.0f64; n_t + 1];
    let mut eps_cnt = vec![0usize; n_t + 1];
    let mut excluded = 0usize;
    let mut int_y = 0.0;
    let mut int_z = 0.0;
    for path in &bundle.paths {
        let y_sol = sol.y_along_path(path, grid, drv);
        for i in 0..=n_t {
            let y_ref = oracle.y(path.v[i]) + offset;
            let diff = (y_ref - y_sol[i]).abs();
            if y_ref.abs() < 1e-10 {
                excluded += 1;
            } else {
                eps_num[i] += diff / y_ref.abs();
                eps_cnt[i] += 1;
            }
            if i >= 1 {
                int_y += h * diff;
                let mut z_ref = oracle.z(path.v[i]);
                let mut z_sol = sol.z_at(path.v[i], i);
                let dims = z_ref.len().max(z_sol.len());
                z_ref.resize(dims, 0.0);
                z_sol.resize(dims, 0.0);
                let dz: f64 =
                    z_ref.iter().zip(&z_sol).map(|(a, b)| (a - b) * (a - b)).sum();
                int_z += h * dz;
            }
        }
    }
    let m = bundle.n_paths() as f64;
    let eps_y = eps_num
        .iter()
        .zip(&eps_cnt)
        .map(|(s, c)| if *c > 0 { s / *c as f64 } else { f64::NAN })
        .collect();
    Ok(EvalReport {
        eps_y,
        int_y: int_y / m,
        int_z: int_z / m,
        lambda_abs_err: (sol.lambda() - oracle.lambda).abs(),
        near_zero_excluded: excluded,
    })
}

/// Mean terminal square loss `E|y0 - Y_tau|^2` of the forward recursion
/// driven by an arbitrary `z` map; used for self-consistency diagnostics.
pub fn recursion_terminal_loss<F>(
    z_fn: F,
    lambda: f64,
    bundle: &PathBundle,
    drv: &Driver,
    y0: f64,
) -> f64
where
    F: Fn(f64) -> Vec<f64> + Sync,
{
    use rayon::prelude::*;
    let h = bundle.grid.h;
    let dims = bundle.dims;
    let losses: Vec<f64> = bundle
        .paths
        .par_iter()
        .map(|p| {
            let mut y = y0;
            for k in 0..p.n_ret {
                let z = z_fn(p.v[k]);
                let dw = p.increments(k, dims);
                let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
                y += -h * drv.eval(p.v[k], &z) + lambda * h + zdw;
            }
            (y - y0) * (y - y0)
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Versioned checkpoint of a trained solver.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub nets: Vec<Mlp>,
    pub lambda: f64,
    pub y0: f64,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_solution(sol: &SolvedEbsde, config_hash: &str) -> Result<Self, SolverError> {
        let (kind, nets, lambda, y0, seed, step) = match sol {
            SolvedEbsde::Gebsde { z_net, lambda, y0, seed, step } => {
                ("gebsde", vec![z_net.clone()], *lambda, *y0, *seed, *step)
            }
            SolvedEbsde::Laebsde { y_net, z_net, lambda, y0, seed, step } => {
                ("laebsde", vec![y_net.clone(), z_net.clone()], *lambda, *y0, *seed, *step)
            }
            _ => return Err(SolverError::CheckpointKind("not a neural solution".into())),
        };
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            nets,
            lambda,
            y0,
            step,
            seed,
            config_hash: config_hash.into(),
        })
    }

    pub fn into_solution(self) -> Result<SolvedEbsde, SolverError> {
        match self.kind.as_str() {
            "gebsde" => {
                let mut nets = self.nets;
                Ok(SolvedEbsde::Gebsde {
                    z_net: nets.remove(0),
                    lambda: self.lambda,
                    y0: self.y0,
                    seed: self.seed,
                    step: self.step,
                })
            }
            "laebsde" => {
                let mut nets = self.nets;
                if nets.len() != 2 {
                    return Err(SolverError::CheckpointKind("laebsde needs two nets".into()));
                }
                let y_net = nets.remove(0);
                Ok(SolvedEbsde::Laebsde {
                    y_net,
                    z_net: nets.remove(0),
                    lambda: self.lambda,
                    y0: self.y0,
                    seed: self.seed,
                    step: self.step,
                })
            }
            other => Err(SolverError::CheckpointKind(other.into())),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SolverError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SolverError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
