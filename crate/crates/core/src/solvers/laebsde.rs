//! Locally additive solver: networks for both `Y` and `Z`, trained on the
//! aggregate of per-time local losses
//! `L_k = mean_{alive j} |Y(V_k) + phi_k - y0|^2`,
//! where `phi_k = sum_{l<k} (h F(V_l, Z(V_l)) - lambda h - Z(V_l)^T dW_l)`
//! and the alive set at `t_k` keeps the paths whose return time is `>= t_k`.
//! The aggregate runs over `k = 1 .. max_j N_j`; the `k = 0` term is the
//! constant-fit `|Y(v0) - y0|^2` and is left out of the objective.

use super::{SolvedEbsde, SolverConfig, SolverError, TrainLog, TrainRecord};
use crate::drivers::{truncate_z, truncate_z_jacobian_apply, Driver};
use crate::nn::{ForwardCache, Mlp, MlpGrads, TrainState};
use crate::rng::derive_seed;
use crate::sde::{simulate_paths, PathBundle};
use rayon::prelude::*;

const Y_NET_SEED_SALT: u64 = 0x5eed_0010;
const Z_NET_SEED_SALT: u64 = 0x5eed_0011;
const EVAL_SEED_SALT: u64 = 0x5eed_0012;
const RESAMPLE_SALT: u64 = 0x2000_0000;

/// Number of alive paths at each index `k` (`alive[k] = #{j : N_j >= k}`).
fn alive_counts(bundle: &PathBundle) -> Vec<usize> {
    let k_max = bundle.max_return_index();
    let mut hist = vec![0usize; k_max + 2];
    for p in &bundle.paths {
        hist[p.n_ret] += 1;
    }
    let mut alive = vec![0usize; k_max + 1];
    let mut acc = 0usize;
    for k in (0..=k_max).rev() {
        acc += hist[k];
        alive[k] = acc;
    }
    alive
}

/// Per-path residuals `r_k = Y(V_k) + phi_k - y0` for `k = 0..=N_j`.
fn path_residuals(
    y_net: &Mlp,
    z_net: &Mlp,
    lambda: f64,
    drv: &Driver,
    y0: f64,
    z_max: Option<f64>,
    p: &crate::sde::FactorPath,
    dims: usize,
    h: f64,
    z_all: &mut Vec<f64>,
    cache: &mut ForwardCache,
) -> Vec<f64> {
    let n = p.n_ret;
    z_all.clear();
    z_all.resize(n * dims, 0.0);
    let mut residuals = Vec::with_capacity(n + 1);
    let mut phi = 0.0f64;
    for k in 0..=n {
        let v = p.v[k];
        let y_out = y_net.forward_cached(v, cache)[0];
        residuals.push(y_out + phi - y0);
        if k < n {
            let z = z_net.forward_cached(v, cache);
            z_all[k * dims..(k + 1) * dims].copy_from_slice(z);
            let dw = p.increments(k, dims);
            let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
            let f = match z_max {
                Some(zm) => drv.eval(v, &truncate_z(z, zm)),
                None => drv.eval(v, z),
            };
            phi += h * f - lambda * h - zdw;
        }
    }
    residuals
}

/// Aggregate locally additive loss (forward only).
pub fn laebsde_loss(
    y_net: &Mlp,
    z_net: &Mlp,
    lambda: f64,
    bundle: &PathBundle,
    drv: &Driver,
    y0: f64,
    z_max: Option<f64>,
) -> f64 {
    let alive = alive_counts(bundle);
    let h = bundle.grid.h;
    let dims = bundle.dims;
    let contributions: Vec<f64> = bundle
        .paths
        .par_iter()
        .map(|p| {
            let mut cache = ForwardCache::default();
            let mut z_all = Vec::new();
            let r = path_residuals(
                y_net, z_net, lambda, drv, y0, z_max, p, dims, h, &mut z_all, &mut cache,
            );
            (1..=p.n_ret).map(|k| r[k] * r[k] / alive[k] as f64).sum()
        })
        .collect();
    contributions.iter().sum()
}

/// Local loss at a single time index (diagnostics; `k` past every return
/// time has an empty alive set and contributes nothing).
pub fn laebsde_local_loss_at(
    y_net: &Mlp,
    z_net: &Mlp,
    lambda: f64,
    bundle: &PathBundle,
    drv: &Driver,
    y0: f64,
    k: usize,
) -> f64 {
    let h = bundle.grid.h;
    let dims = bundle.dims;
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut cache = ForwardCache::default();
    let mut z_all = Vec::new();
    for p in &bundle.paths {
        if p.n_ret < k {
            continue;
        }
        let r =
            path_residuals(y_net, z_net, lambda, drv, y0, None, p, dims, h, &mut z_all, &mut cache);
        acc += r[k] * r[k];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Per-thread scratch: activation caches for both networks per time step,
/// reused across paths.
struct Workspace {
    y_caches: Vec<ForwardCache>,
    z_caches: Vec<ForwardCache>,
    y_grads: Option<MlpGrads>,
    z_grads: Option<MlpGrads>,
    g: Vec<f64>,
    r: Vec<f64>,
}

impl Workspace {
    fn new() -> Self {
        Workspace {
            y_caches: Vec::new(),
            z_caches: Vec::new(),
            y_grads: None,
            z_grads: None,
            g: Vec::new(),
            r: Vec::new(),
        }
    }

    fn prepare(&mut self, steps: usize, dims: usize, y_net: &Mlp, z_net: &Mlp) {
        if self.y_caches.len() < steps + 1 {
            self.y_caches.resize_with(steps + 1, ForwardCache::default);
        }
        if self.z_caches.len() < steps {
            self.z_caches.resize_with(steps, ForwardCache::default);
        }
        match &mut self.y_grads {
            Some(g) => g.reset(),
            None => self.y_grads = Some(MlpGrads::zeros_like(y_net)),
        }
        match &mut self.z_grads {
            Some(g) => g.reset(),
            None => self.z_grads = Some(MlpGrads::zeros_like(z_net)),
        }
        self.g.resize(dims, 0.0);
        self.r.clear();
    }
}

/// Loss and exact gradients; parameter layout is `[Y-net, Z-net, lambda]`.
pub fn laebsde_loss_and_grads(
    state: &TrainState,
    bundle: &PathBundle,
    drv: &Driver,
    y0: f64,
    z_max: Option<f64>,
) -> (f64, Vec<f64>) {
    let y_net = &state.nets[0];
    let z_net = &state.nets[1];
    let lambda = state.lambda_bar;
    let alive = alive_counts(bundle);
    let h = bundle.grid.h;
    let dims = bundle.dims;

    let per_path: Vec<(f64, Vec<f64>)> = bundle
        .paths
        .par_iter()
        .map_init(Workspace::new, |ws, p| {
            let n = p.n_ret;
            ws.prepare(n, dims, y_net, z_net);
            let Workspace { y_caches, z_caches, y_grads, z_grads, g, r } = ws;
            let y_grads = y_grads.as_mut().expect("prepared");
            let z_grads = z_grads.as_mut().expect("prepared");

            // Forward: residuals r_k = Y(V_k) + phi_k - y0, keeping the
            // activations of both networks per step.
            let mut phi = 0.0f64;
            for k in 0..=n {
                let v = p.v[k];
                let y_out = y_net.forward_cached(v, &mut y_caches[k])[0];
                r.push(y_out + phi - y0);
                if k < n {
                    let z = z_net.forward_cached(v, &mut z_caches[k]);
                    let dw = p.increments(k, dims);
                    let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
                    let f = match z_max {
                        Some(zm) => drv.eval(v, &truncate_z(z, zm)),
                        None => drv.eval(v, z),
                    };
                    phi += h * f - lambda * h - zdw;
                }
            }
            // c_k = 2 r_k / |T_k| for the indices in the aggregate.
            let c: Vec<f64> = (0..=n)
                .map(|k| if k >= 1 { 2.0 * r[k] / alive[k] as f64 } else { 0.0 })
                .collect();
            let loss: f64 = (1..=n).map(|k| r[k] * r[k] / alive[k] as f64).sum();

            // Y-network: local term k touches Y(V_k) directly.
            for k in 1..=n {
                y_net.backward(&y_caches[k], &[c[k]], y_grads);
            }

            // Z-network: phi_k sums steps l < k, so step l receives the
            // suffix weight S_l = sum_{k>l} c_k. The ergodic cost enters
            // phi_k as -t_k.
            let mut lambda_grad = 0.0;
            for k in 1..=n {
                lambda_grad += c[k] * (-(k as f64) * h);
            }
            let mut suffix = 0.0;
            for l in (0..n).rev() {
                suffix += c[l + 1];
                let v = p.v[l];
                let z = z_caches[l].act.last().expect("forward ran");
                let dw = p.increments(l, dims);
                match z_max {
                    Some(zm) => {
                        let grad_f = drv.grad_z(v, &truncate_z(z, zm));
                        let chained = truncate_z_jacobian_apply(z, zm, &grad_f);
                        for i in 0..dims {
                            g[i] = suffix * (h * chained[i] - dw[i]);
                        }
                    }
                    None => {
                        let grad_f = drv.grad_z(v, z);
                        for i in 0..dims {
                            g[i] = suffix * (h * grad_f[i] - dw[i]);
                        }
                    }
                }
                z_net.backward(&z_caches[l], g, z_grads);
            }

            let mut flat = Vec::with_capacity(state.n_params());
            y_grads.flatten_into(&mut flat);
            z_grads.flatten_into(&mut flat);
            flat.push(lambda_grad);
            (loss, flat)
        })
        .collect();

    let mut grad = vec![0.0; state.n_params()];
    let mut loss = 0.0;
    for (l, flat) in &per_path {
        loss += l;
        for (g, f) in grad.iter_mut().zip(flat) {
            *g += f;
        }
    }
    (loss, grad)
}

/// Trains the locally additive solver per its configuration.
pub fn laebsde_train(cfg: &SolverConfig) -> Result<(SolvedEbsde, TrainLog), SolverError> {
    let start = std::time::Instant::now();
    let dims = cfg.model.dims();
    let z_max = cfg.z_max();
    let mut bundle = simulate_paths(&cfg.model, &cfg.grid, cfg.batch, cfg.seed)?;
    let eval_bundle = if cfg.eval_every > 0 {
        Some(simulate_paths(&cfg.model, &cfg.grid, cfg.eval_batch, derive_seed(cfg.seed, EVAL_SEED_SALT))?)
    } else {
        None
    };

    let y_net = Mlp::glorot(&Mlp::standard_sizes(dims, 1), derive_seed(cfg.seed, Y_NET_SEED_SALT));
    let z_net = Mlp::glorot(&Mlp::standard_sizes(dims, dims), derive_seed(cfg.seed, Z_NET_SEED_SALT));
    let mut state = TrainState::new(vec![y_net, z_net], cfg.lr, cfg.k_bound, cfg.lr_decay);
    let mut log = TrainLog::default();

    for m in 0..cfg.grad_steps {
        if cfg.resample && m > 0 {
            bundle = simulate_paths(
                &cfg.model,
                &cfg.grid,
                cfg.batch,
                derive_seed(cfg.seed, RESAMPLE_SALT + m as u64),
            )?;
        }
        let (loss, grads) = laebsde_loss_and_grads(&state, &bundle, &cfg.driver, cfg.y0, z_max);
        if !loss.is_finite() {
            return Err(SolverError::NonFiniteLoss { step: m as u64 });
        }
        let eval_loss = match (&eval_bundle, cfg.eval_every) {
            (Some(eb), every) if every > 0 && (m % every == 0 || m + 1 == cfg.grad_steps) => {
                Some(laebsde_loss(
                    &state.nets[0],
                    &state.nets[1],
                    state.lambda_bar,
                    eb,
                    &cfg.driver,
                    cfg.y0,
                    z_max,
                ))
            }
            _ => None,
        };
        state.adam_step(&grads);
        log.records.push(TrainRecord {
            step: state.step,
            train_loss: loss,
            eval_loss,
            lambda_bar: state.lambda_bar,
        });
    }
    log.runtime = start.elapsed().as_secs_f64();
    let lambda = state.lambda_bar;
    let step = state.step;
    let y_net = state.nets.remove(0);
    let z_net = state.nets.remove(0);
    Ok((SolvedEbsde::Laebsde { y_net, z_net, lambda, y0: cfg.y0, seed: cfg.seed, step }, log))
}
