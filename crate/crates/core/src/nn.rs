//! Minimal feed-forward network and optimizer: two tanh hidden layers,
//! Glorot-normal initialization, exact reverse-mode gradients, and Adam with
//! a clamped trainable ergodic-cost parameter.
//!
//! Everything is double precision; the horizon-length recursions downstream
//! accumulate too much error in single precision.

use crate::rng::path_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Fully connected network, scalar input. Hidden layers use tanh; the output
/// layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `[1, hidden, hidden, out]`.
    pub sizes: Vec<usize>,
    /// Per layer, row-major `(out x in)`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Mlp {
    /// Glorot-normal weights (std `sqrt(2/(fan_in+fan_out))`), zero biases.
    pub fn glorot(sizes: &[usize], seed: u64) -> Self {
        assert!(sizes.len() >= 2);
        let mut rng = path_rng(seed, u64::MAX - 1);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    z * std
                })
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Mlp { sizes: sizes.to_vec(), weights, biases }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let weights =
            (0..sizes.len() - 1).map(|l| vec![0.0; sizes[l] * sizes[l + 1]]).collect();
        let biases = (0..sizes.len() - 1).map(|l| vec![0.0; sizes[l + 1]]).collect();
        Mlp { sizes: sizes.to_vec(), weights, biases }
    }

    /// The architecture used by both solvers: `1 -> 20+d -> 20+d -> out`.
    pub fn standard_sizes(brownian_dims: usize, out: usize) -> Vec<usize> {
        let hidden = 20 + brownian_dims;
        vec![1, hidden, hidden, out]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn n_params(&self) -> usize {
        (0..self.n_layers()).map(|l| self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1]).sum()
    }

    /// Forward pass writing activations into `cache`; returns the output
    /// slice (alias of the last activation buffer).
    pub fn forward_cached<'a>(&self, v: f64, cache: &'a mut ForwardCache) -> &'a [f64] {
        cache.ensure_shape(&self.sizes);
        cache.input = v;
        let n_layers = self.n_layers();
        let input_buf = [v];
        for l in 0..n_layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.weights[l];
            let b = &self.biases[l];
            // Split borrows: the input of layer l is the activation of l-1.
            let (done, rest) = cache.act.split_at_mut(l);
            let x: &[f64] = if l == 0 { &input_buf } else { &done[l - 1] };
            let out = &mut rest[0];
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                let mut acc = b[i];
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                out[i] = if l + 1 < n_layers { acc.tanh() } else { acc };
            }
        }
        &cache.act[n_layers - 1]
    }

    /// Convenience allocating forward.
    pub fn forward(&self, v: f64) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(v, &mut cache).to_vec()
    }

    /// Accumulates into `grads` the gradient of `out . grad_out` with respect
    /// to every weight and bias, using the activations stored in `cache`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64], grads: &mut MlpGrads) {
        let n_layers = self.n_layers();
        debug_assert_eq!(grad_out.len(), self.out_dim());
        let mut delta = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &self.weights[l];
            let input_buf = [cache.input];
            let x: &[f64] = if l == 0 { &input_buf } else { &cache.act[l - 1] };
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for i in 0..n_out {
                let d = delta[i];
                gb[i] += d;
                let row = &mut gw[i * n_in..(i + 1) * n_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            if l > 0 {
                let mut next = vec![0.0; n_in];
                for i in 0..n_out {
                    let d = delta[i];
                    let row = &w[i * n_in..(i + 1) * n_in];
                    for (n, wi) in next.iter_mut().zip(row) {
                        *n += d * wi;
                    }
                }
                // tanh' = 1 - act^2 at the activation feeding this layer.
                for (n, a) in next.iter_mut().zip(&cache.act[l - 1]) {
                    *n *= 1.0 - a * a;
                }
                delta = next;
            }
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in 0..self.n_layers() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for l in 0..self.sizes.len() - 1 {
            let nw = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        off
    }
}

/// Reusable activation buffers for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    pub input: f64,
    /// Post-activation per layer (tanh for hidden, raw for output).
    pub act: Vec<Vec<f64>>,
}

impl ForwardCache {
    fn ensure_shape(&mut self, sizes: &[usize]) {
        if self.act.len() != sizes.len() - 1 {
            self.act = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        }
    }
}

/// Gradient accumulator mirroring an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for w in &mut self.weights {
            w.fill(0.0);
        }
        for b in &mut self.biases {
            b.fill(0.0);
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in 0..self.weights.len() {
            out.extend_from_slice(&self.weights[l]);
            out.extend_from_slice(&self.biases[l]);
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Networks, the trainable ergodic cost, and the Adam moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub nets: Vec<Mlp>,
    /// Trainable ergodic cost, clamped to `[-k_bound, k_bound]`.
    pub lambda_bar: f64,
    pub k_bound: f64,
    pub lr: f64,
    /// Halve the learning rate every 2500 steps when enabled.
    pub lr_decay: bool,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl TrainState {
    pub fn new(nets: Vec<Mlp>, lr: f64, k_bound: f64, lr_decay: bool) -> Self {
        let n: usize = nets.iter().map(Mlp::n_params).sum::<usize>() + 1;
        TrainState {
            nets,
            lambda_bar: 0.0,
            k_bound,
            lr,
            lr_decay,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Total parameter count including the ergodic cost (last slot).
    pub fn n_params(&self) -> usize {
        self.m.len()
    }

    pub fn current_lr(&self) -> f64 {
        if self.lr_decay {
            self.lr * 0.5f64.powi((self.step / 2500) as i32)
        } else {
            self.lr
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.n_params());
        for net in &self.nets {
            net.flatten_into(&mut flat);
        }
        flat.push(self.lambda_bar);
        flat
    }

    pub fn assign(&mut self, flat: &[f64]) {
        debug_assert_eq!(flat.len(), self.n_params());
        let mut off = 0;
        for net in &mut self.nets {
            off += net.assign_from_flat(&flat[off..]);
        }
        self.lambda_bar = flat[off];
    }

    /// One Adam update (bias-corrected) on all parameters and the ergodic
    /// cost; the cost is clamped to `[-K, K]` afterwards.
    pub fn adam_step(&mut self, grads: &[f64]) {
        debug_assert_eq!(grads.len(), self.n_params());
        self.step += 1;
        let lr = self.current_lr();
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let mut params = self.flatten();
        for i in 0..params.len() {
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * grads[i];
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        let last = params.len() - 1;
        params[last] = params[last].clamp(-self.k_bound, self.k_bound);
        self.assign(&params);
    }
}
