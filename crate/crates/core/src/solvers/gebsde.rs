//! Global solver: the forward recursion
//! `Y_{k+1} = Y_k - h F(V_k, Z(V_k)) + lambda h + Z(V_k)^T dW_k`
//! from the pinned `Y_0 = y0` up to each path's return index, trained on the
//! terminal square loss `mean |y0 - Y_tau|^2` over the batch.
//!
//! Gradients flow through every step: the network receives
//! `-h grad_z F + dW` per step scaled by the residual, and the ergodic cost
//! receives the per-path return time (`Y_tau` contains `lambda h` once per
//! step, so `dY_tau/dlambda = tau`).

use super::{SolvedEbsde, SolverConfig, SolverError, TrainLog, TrainRecord};
use crate::drivers::{truncate_z, truncate_z_jacobian_apply, Driver};
use crate::nn::{ForwardCache, Mlp, MlpGrads, TrainState};
use crate::rng::derive_seed;
use crate::sde::{simulate_paths, PathBundle};
use rayon::prelude::*;

const NET_SEED_SALT: u64 = 0x5eed_0001;
const EVAL_SEED_SALT: u64 = 0x5eed_0002;
const RESAMPLE_SALT: u64 = 0x1000_0000;

/// Terminal loss of the recursion under the current network (forward only).
pub fn gebsde_loss(
    z_net: &Mlp,
    lambda: f64,
    bundle: &PathBundle,
    drv: &Driver,
    y0: f64,
    z_max: Option<f64>,
) -> f64 {
    let h = bundle.grid.h;
    let dims = bundle.dims;
    let losses: Vec<f64> = bundle
        .paths
        .par_iter()
        .map(|p| {
            let mut cache = ForwardCache::default();
            let mut y = y0;
            for k in 0..p.n_ret {
                let v = p.v[k];
                let z = z_net.forward_cached(v, &mut cache);
                let dw = p.increments(k, dims);
                let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
                let f = match z_max {
                    Some(zm) => drv.eval(v, &truncate_z(z, zm)),
                    None => drv.eval(v, z),
                };
                y += -h * f + lambda * h + zdw;
            }
            (y - y0) * (y - y0)
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

/// Per-thread scratch for the gradient pass: one activation cache per time
/// step, reused across paths.
struct Workspace {
    caches: Vec<ForwardCache>,
    grads: Option<MlpGrads>,
    g: Vec<f64>,
}

impl Workspace {
    fn new() -> Self {
        Workspace { caches: Vec::new(), grads: None, g: Vec::new() }
    }

    fn prepare(&mut self, steps: usize, dims: usize, net: &Mlp) {
        if self.caches.len() < steps {
            self.caches.resize_with(steps, ForwardCache::default);
        }
        match &mut self.grads {
            Some(g) => g.reset(),
            None => self.grads = Some(MlpGrads::zeros_like(net)),
        }
        self.g.resize(dims, 0.0);
    }
}

/// Loss and its exact gradient with respect to all network parameters and
/// the trainable ergodic cost (last slot).
pub fn gebsde_loss_and_grads(
    state: &TrainState,
    bundle: &PathBundle,
    drv: &Driver,
    y0: f64,
    z_max: Option<f64>,
) -> (f64, Vec<f64>) {
    let z_net = &state.nets[0];
    let lambda = state.lambda_bar;
    let h = bundle.grid.h;
    let dims = bundle.dims;
    let b = bundle.n_paths() as f64;

    let per_path: Vec<(f64, Vec<f64>)> = bundle
        .paths
        .par_iter()
        .map_init(Workspace::new, |ws, p| {
            ws.prepare(p.n_ret, dims, z_net);
            let Workspace { caches, grads, g } = ws;
            let grads = grads.as_mut().expect("prepared");
            // Forward pass: accumulate Y, keeping activations per step.
            let mut y = y0;
            for (k, cache) in caches.iter_mut().enumerate().take(p.n_ret) {
                let v = p.v[k];
                let z = z_net.forward_cached(v, cache);
                let dw = p.increments(k, dims);
                let zdw: f64 = z.iter().zip(dw).map(|(a, b)| a * b).sum();
                let f = match z_max {
                    Some(zm) => drv.eval(v, &truncate_z(z, zm)),
                    None => drv.eval(v, z),
                };
                y += -h * f + lambda * h + zdw;
            }
            let residual = y - y0;
            let scale = 2.0 * residual / b;

            // Backward pass over the stored activations.
            for (k, cache) in caches.iter().enumerate().take(p.n_ret) {
                let v = p.v[k];
                let z = cache.act.last().expect("forward ran");
                let dw = p.increments(k, dims);
                match z_max {
                    Some(zm) => {
                        let grad_f = drv.grad_z(v, &truncate_z(z, zm));
                        let chained = truncate_z_jacobian_apply(z, zm, &grad_f);
                        for i in 0..dims {
                            g[i] = scale * (-h * chained[i] + dw[i]);
                        }
                    }
                    None => {
                        let grad_f = drv.grad_z(v, z);
                        for i in 0..dims {
                            g[i] = scale * (-h * grad_f[i] + dw[i]);
                        }
                    }
                }
                z_net.backward(cache, g, grads);
            }

            let mut flat = Vec::with_capacity(state.n_params());
            grads.flatten_into(&mut flat);
            // dY_tau / dlambda = tau for this path.
            flat.push(scale * (h * p.n_ret as f64));
            (residual * residual, flat)
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
    (loss / b, grad)
}

/// Trains the global solver per its configuration.
pub fn gebsde_train(cfg: &SolverConfig) -> Result<(SolvedEbsde, TrainLog), SolverError> {
    let start = std::time::Instant::now();
    let dims = cfg.model.dims();
    let z_max = cfg.z_max();
    let mut bundle = simulate_paths(&cfg.model, &cfg.grid, cfg.batch, cfg.seed)?;
    let eval_bundle = if cfg.eval_every > 0 {
        Some(simulate_paths(&cfg.model, &cfg.grid, cfg.eval_batch, derive_seed(cfg.seed, EVAL_SEED_SALT))?)
    } else {
        None
    };

    let z_net = Mlp::glorot(&Mlp::standard_sizes(dims, dims), derive_seed(cfg.seed, NET_SEED_SALT));
    let mut state = TrainState::new(vec![z_net], cfg.lr, cfg.k_bound, cfg.lr_decay);
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
        let (loss, grads) = gebsde_loss_and_grads(&state, &bundle, &cfg.driver, cfg.y0, z_max);
        if !loss.is_finite() {
            return Err(SolverError::NonFiniteLoss { step: m as u64 });
        }
        let eval_loss = match (&eval_bundle, cfg.eval_every) {
            (Some(eb), every) if every > 0 && (m % every == 0 || m + 1 == cfg.grad_steps) => {
                Some(gebsde_loss(&state.nets[0], state.lambda_bar, eb, &cfg.driver, cfg.y0, z_max))
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
    Ok((
        SolvedEbsde::Gebsde {
            z_net: state.nets.remove(0),
            lambda,
            y0: cfg.y0,
            seed: cfg.seed,
            step,
        },
        log,
    ))
}
