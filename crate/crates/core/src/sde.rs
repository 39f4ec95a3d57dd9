//! One-dimensional stochastic factor: Euler simulation and recurrence
//! diagnostics.
//!
//! The factor follows `dV = mu(V) dt + kappa^T dW` with a dissipative affine
//! drift and constant volatility row vector `kappa`. Paths are simulated on a
//! uniform grid and continued past the minimal horizon `T` until the first
//! grid time at which `(V_{n_T} - v0)(V_k - v0) <= 0`, the discrete return
//! time used as the random horizon everywhere downstream.

use crate::quad::{adaptive_simpson, QuadError};
use crate::rng::path_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("path {path} reached max_steps = {max_steps} without returning; \
             check h, T and the drift's recurrence")]
    ReturnTimeCapExceeded { path: usize, max_steps: usize },
    #[error("dissipativity estimate {estimate} is negative")]
    DissipativityViolated { estimate: f64 },
    #[error(transparent)]
    Quadrature(#[from] QuadError),
}

/// Drift specification. Both variants are affine, `mu(v) = a v + b` with
/// `a < 0`, which makes the dissipativity constant exactly `-a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DriftKind {
    /// `mu(v) = -rate * v`, `rate > 0`.
    OrnsteinUhlenbeck { rate: f64 },
    /// `mu(v) = slope * v + intercept`, `slope < 0`.
    CustomAffine { slope: f64, intercept: f64 },
}

impl DriftKind {
    fn coefficients(&self) -> (f64, f64) {
        match *self {
            DriftKind::OrnsteinUhlenbeck { rate } => (-rate, 0.0),
            DriftKind::CustomAffine { slope, intercept } => (slope, intercept),
        }
    }
}

/// The stochastic factor `V`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub drift: DriftKind,
    /// Volatility row vector; `kappa kappa^T > 0`.
    pub kappa: Vec<f64>,
    pub v0: f64,
    /// Dissipativity constant; for affine drifts it equals `-slope`.
    pub c_mu: f64,
}

impl FactorModel {
    pub fn ou(rate: f64, kappa: Vec<f64>, v0: f64) -> Result<Self, SdeError> {
        let model =
            FactorModel { drift: DriftKind::OrnsteinUhlenbeck { rate }, kappa, v0, c_mu: rate };
        model.validate()?;
        Ok(model)
    }

    pub fn affine(slope: f64, intercept: f64, kappa: Vec<f64>, v0: f64) -> Result<Self, SdeError> {
        let model = FactorModel {
            drift: DriftKind::CustomAffine { slope, intercept },
            kappa,
            v0,
            c_mu: -slope,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), SdeError> {
        let (a, _) = self.drift.coefficients();
        if !(a < 0.0) {
            return Err(SdeError::InvalidModel(format!("drift slope must be negative, got {a}")));
        }
        if self.c_mu <= 0.0 {
            return Err(SdeError::InvalidModel(format!("c_mu must be positive, got {}", self.c_mu)));
        }
        if (self.c_mu - (-a)).abs() > 1e-12 * self.c_mu.max(1.0) {
            return Err(SdeError::InvalidModel(format!(
                "c_mu = {} inconsistent with drift slope {a}",
                self.c_mu
            )));
        }
        if self.kappa.is_empty() || !self.kappa.iter().all(|k| k.is_finite()) {
            return Err(SdeError::InvalidModel("kappa must be a non-empty finite vector".into()));
        }
        Ok(())
    }

    /// Number of Brownian coordinates.
    pub fn dims(&self) -> usize {
        self.kappa.len()
    }

    /// `||kappa||^2 = kappa kappa^T`.
    pub fn kappa_sq(&self) -> f64 {
        self.kappa.iter().map(|k| k * k).sum()
    }

    pub fn kappa_norm(&self) -> f64 {
        self.kappa_sq().sqrt()
    }

    /// Drift value `mu(v)`.
    pub fn drift_eval(&self, v: f64) -> f64 {
        let (a, b) = self.drift.coefficients();
        a * v + b
    }

    /// Stationary standard deviation of the affine-drift diffusion.
    pub fn stationary_std(&self) -> f64 {
        (self.kappa_sq() / (2.0 * self.c_mu)).sqrt()
    }
}

/// Uniform time grid with a minimal horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// Step size.
    pub h: f64,
    /// Minimal horizon before the return time is searched.
    pub t_min: f64,
    /// Hard cap on path length.
    pub max_steps: usize,
}

impl TimeGrid {
    /// Grid with `max_steps = 100 * n_t`.
    pub fn new(h: f64, t_min: f64) -> Result<Self, SdeError> {
        if !(h > 0.0) {
            return Err(SdeError::InvalidGrid(format!("h must be positive, got {h}")));
        }
        if !(t_min > 0.0) {
            return Err(SdeError::InvalidGrid(format!("T must be positive, got {t_min}")));
        }
        let n_t = (t_min / h).floor() as usize + 1;
        Ok(TimeGrid { h, t_min, max_steps: 100 * n_t })
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Result<Self, SdeError> {
        if max_steps <= self.n_t() {
            return Err(SdeError::InvalidGrid(format!(
                "max_steps = {max_steps} must exceed n_T = {}",
                self.n_t()
            )));
        }
        self.max_steps = max_steps;
        Ok(self)
    }

    /// Index of the minimal horizon: `floor(T/h) + 1`, so `n_t * h >= T`.
    pub fn n_t(&self) -> usize {
        (self.t_min / self.h).floor() as usize + 1
    }
}

/// One Euler path kept until its return index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPath {
    /// Factor values on the grid, indices `0..=n_ret`.
    pub v: Vec<f64>,
    /// Brownian increments, step-major: `dw[k*d..(k+1)*d]` drives step `k`.
    pub dw: Vec<f64>,
    /// Return index: the discrete return time is `h * n_ret`.
    pub n_ret: usize,
}

impl FactorPath {
    pub fn increments(&self, k: usize, dims: usize) -> &[f64] {
        &self.dw[k * dims..(k + 1) * dims]
    }
}

/// A batch of simulated paths with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub dims: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    pub paths: Vec<FactorPath>,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    /// Discrete return time of path `j`.
    pub fn tau(&self, j: usize) -> f64 {
        self.grid.h * self.paths[j].n_ret as f64
    }

    pub fn mean_tau(&self) -> f64 {
        self.paths.iter().map(|p| p.n_ret as f64).sum::<f64>() * self.grid.h
            / self.paths.len() as f64
    }

    pub fn max_return_index(&self) -> usize {
        self.paths.iter().map(|p| p.n_ret).max().unwrap_or(0)
    }
}

/// Simulates `n_paths` Euler paths, each continued past `n_T` until the first
/// sign change of `(V_{n_T} - v0)(V_k - v0)`.
///
/// Each path draws from its own counter-based stream, so the result is
/// independent of scheduling and thread count.
pub fn simulate_paths(
    model: &FactorModel,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle, SdeError> {
    model.validate()?;
    let dims = model.dims();
    let paths: Result<Vec<FactorPath>, SdeError> = (0..n_paths)
        .into_par_iter()
        .map(|j| simulate_one(model, grid, seed, j))
        .collect();
    Ok(PathBundle { dims, grid: *grid, seed, paths: paths? })
}

fn simulate_one(
    model: &FactorModel,
    grid: &TimeGrid,
    seed: u64,
    path_index: usize,
) -> Result<FactorPath, SdeError> {
    let dims = model.dims();
    let n_t = grid.n_t();
    let h = grid.h;
    let sqrt_h = h.sqrt();
    let mut rng = path_rng(seed, path_index as u64);

    let mut v = Vec::with_capacity(n_t + 2);
    let mut dw = Vec::with_capacity((n_t + 2) * dims);
    v.push(model.v0);

    let step = |v_cur: f64, dw: &mut Vec<f64>, rng: &mut rand_chacha::ChaCha8Rng| -> f64 {
        let mut kdw = 0.0;
        for &kj in &model.kappa {
            let z: f64 = rng.sample(StandardNormal);
            let d = z * sqrt_h;
            dw.push(d);
            kdw += kj * d;
        }
        v_cur + model.drift_eval(v_cur) * h + kdw
    };

    for _ in 0..=n_t {
        let next = step(*v.last().unwrap(), &mut dw, &mut rng);
        v.push(next);
    }
    // v now holds indices 0..=n_t+1; the crossing search starts at n_t + 1.
    let v_ref = v[n_t] - model.v0;
    let mut k = n_t + 1;
    while v_ref * (v[k] - model.v0) > 0.0 {
        if k + 1 > grid.max_steps {
            return Err(SdeError::ReturnTimeCapExceeded {
                path: path_index,
                max_steps: grid.max_steps,
            });
        }
        let next = step(v[k], &mut dw, &mut rng);
        v.push(next);
        k += 1;
    }
    v.truncate(k + 1);
    dw.truncate(k * dims);
    Ok(FactorPath { v, dw, n_ret: k })
}

/// Return-time moment bounds from the scale function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpMomentBounds {
    pub b_plus: f64,
    pub b_minus: f64,
    /// Admissible exponential-moment threshold `1 / (4 max(B-, B+))`.
    pub gamma_threshold: f64,
}

const QUAD_REL_TOL: f64 = 1e-8;
const MESH_POINTS: usize = 480;

/// Computes
/// `B+ = sup_{x >= v0}  int_{v0}^x s(u) du * int_x^inf 2/(||kappa||^2 s(u)) du`
/// and the symmetric `B-`, with `s(x) = exp(-2 int_0^x mu(u)/||kappa||^2 du)`.
///
/// The outer domain is truncated at `v0 +- 12` stationary standard deviations
/// (the integrands decay super-exponentially for dissipative drifts) and the
/// sup is taken on a uniform mesh with cumulative adaptive Simpson segments.
pub fn exp_moment_bounds(model: &FactorModel, v0: f64) -> Result<ExpMomentBounds, SdeError> {
    model.validate()?;
    let kk = model.kappa_sq();
    let (a, b) = model.drift.coefficients();
    // s(x) = exp(m(x)) with m(x) = -2 (a x^2/2 + b x) / kk, analytic for affine drifts.
    let log_s = move |x: f64| -2.0 * (0.5 * a * x * x + b * x) / kk;
    let s = move |x: f64| log_s(x).exp();
    let inv_s = move |x: f64| 2.0 / (kk * log_s(x).exp());

    let sigma = model.stationary_std();
    let mean = -b / a;
    let reach = 12.0 * sigma + (mean - v0).abs();

    let b_plus = directional_bound(&s, &inv_s, v0, v0 + reach, sigma)?;
    let b_minus = directional_bound(&s, &inv_s, v0, v0 - reach, sigma)?;
    let gamma_threshold = 1.0 / (4.0 * b_minus.max(b_plus));
    Ok(ExpMomentBounds { b_plus, b_minus, gamma_threshold })
}

/// `sup_x A(x) C(x)` over the mesh from `v0` towards `far`, where
/// `A(x) = |int_{v0}^x s|` and `C(x) = |int_x^{far + tail} inv_s|`.
fn directional_bound(
    s: &impl Fn(f64) -> f64,
    inv_s: &impl Fn(f64) -> f64,
    v0: f64,
    far: f64,
    sigma: f64,
) -> Result<f64, SdeError> {
    let n = MESH_POINTS;
    let step = (far - v0) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| v0 + step * i as f64).collect();

    // A(xs[i]), cumulative from v0 outward.
    let mut a_cum = vec![0.0f64; n + 1];
    for i in 1..=n {
        let seg = segment(s, xs[i - 1], xs[i])?;
        a_cum[i] = a_cum[i - 1] + seg.abs();
    }
    // C(xs[i]), cumulative from the far end inward, plus a tail segment.
    let tail_end = far + 2.0 * sigma * step.signum();
    let mut c_cum = vec![0.0f64; n + 1];
    c_cum[n] = segment(inv_s, far, tail_end)?.abs();
    for i in (0..n).rev() {
        let seg = segment(inv_s, xs[i], xs[i + 1])?;
        c_cum[i] = c_cum[i + 1] + seg.abs();
    }

    let sup = (0..=n).map(|i| a_cum[i] * c_cum[i]).fold(0.0f64, f64::max);
    if !sup.is_finite() {
        return Err(SdeError::Quadrature(QuadError::NonConvergent {
            a: v0,
            b: far,
            tol: QUAD_REL_TOL,
        }));
    }
    Ok(sup)
}

fn segment(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> Result<f64, SdeError> {
    // Tolerance relative to a crude estimate of the segment mass.
    let rough = 0.5 * (f(a).abs() + f(b).abs()) * (b - a).abs();
    let tol = (rough * QUAD_REL_TOL).max(1e-30);
    Ok(adaptive_simpson(f, a, b, tol)?)
}

/// Estimates the dissipativity constant by sampling pairs: returns
/// `inf -(mu(v) - mu(vbar))(v - vbar) / |v - vbar|^2`.
pub fn check_dissipativity(
    model: &FactorModel,
    n_samples: usize,
    seed: u64,
) -> Result<f64, SdeError> {
    assert!(n_samples >= 2, "need at least two samples");
    let mut rng = path_rng(seed, u64::MAX);
    let mut inf = f64::INFINITY;
    for _ in 0..n_samples {
        let v: f64 = rng.gen_range(-10.0..10.0);
        let mut vb: f64 = rng.gen_range(-10.0..10.0);
        if (v - vb).abs() < 1e-12 {
            vb += 0.5;
        }
        let q = -(model.drift_eval(v) - model.drift_eval(vb)) * (v - vb) / (v - vb).powi(2);
        inf = inf.min(q);
    }
    if inf < 0.0 {
        return Err(SdeError::DissipativityViolated { estimate: inf });
    }
    Ok(inf)
}
