//! Per-timestep value networks and their evaluation/differentiation kernels.
//!
//! Each timestep `n` owns a small feedforward net whose scalar output `F`
//! corrects the value of a parent timestep `n+η`:
//!
//! ```text
//! y^n(s) = α · [ y^{n+η}(s) + η·Δt·F(s, g(s), y^{n+η}(s)) ]
//! ```
//!
//! with the recursion grounded at expiry by the softplus-smoothed payoff.
//! The net itself is a stack of bias-free linear layers, each followed by
//! normalization (`γ·(z−μ)/√(σ²+ε)+β`) and ReLU; the input feature vector
//! `(s, g(s), y_parent(s)) ∈ R^{d+2}` passes through a normalization with
//! frozen whitening statistics, and the output layer is affine with the
//! only bias in the net.
//!
//! Three kernels operate on a net:
//!
//! * [`batch_stats`] — the layer-major forward pass that produces the
//!   per-layer mean/variance of a training minibatch;
//! * [`loss_and_param_grads`] — the squared-residual training loss
//!   `Σ_m (c₁·y_m + ẏ_m − v_m)²` and its exact parameter gradient, where
//!   `ẏ_m` is the directional derivative of `y` along a per-sample input
//!   direction (a forward-tangent pass), so the gradient needs a
//!   reverse-over-forward sweep;
//! * [`infer_values_and_grads`] — value and input gradient under the
//!   stored running statistics.
//!
//! Normalization statistics are treated as constants when differentiating
//! (stop-gradient), for both input tangents and parameter gradients; the
//! kernels therefore take the statistics as explicit data.  ReLU is given
//! derivative 0 at its kink.

use crate::market::PayoffSpec;
use crate::parallel;
use crate::rng;
use std::collections::BTreeMap;
use thiserror::Error;

/// Variance floor inside every normalization denominator.
pub const BN_EPS: f64 = 1e-6;

/// A channel whose batch variance is at machine level relative to its mean
/// carries no usable variation (e.g. every sample sits at the same state,
/// as happens at the first timestep where all paths start from one point).
/// Normalizing such a channel by √(var+ε) would amplify evaluation-time
/// offsets and loss tangents by 1/√ε per layer, which is pure noise; those
/// channels are passed through centered but unscaled instead.
pub const DEGENERATE_VAR_REL: f64 = 1e-8;

/// The scale σ used by the normalization `(z − μ)/σ`.
#[inline]
fn norm_scale(mu: f64, var: f64) -> f64 {
    if var <= DEGENERATE_VAR_REL * (1.0 + mu * mu) {
        1.0
    } else {
        (var + BN_EPS).sqrt()
    }
}

#[derive(Debug, Error)]
pub enum NetError {
    #[error("normalization statistics need at least 2 samples, got {len}")]
    DegenerateBatch { len: usize },
    #[error("no net trained for timestep {timestep}")]
    MissingNet { timestep: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Architecture of one timestep net: `hidden_layers` equal-width hidden
/// layers on top of a `(d+2)`-dimensional input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub input_dim: usize,
    pub width: usize,
    pub hidden_layers: usize,
}

impl NetShape {
    /// Input width of hidden layer `l` (0-based).
    pub fn fan_in(&self, l: usize) -> usize {
        if l == 0 {
            self.input_dim
        } else {
            self.width
        }
    }
}

/// Weights of one hidden layer: bias-free linear map plus normalization
/// scale/shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// Row-major `width × fan_in`.
    pub w: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Every trainable parameter of a timestep net, in a fixed flattening
/// order (per hidden layer: w, γ, β; then input γ⁰, β⁰; output ω, b; α).
/// The same struct holds parameter gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub layers: Vec<LayerParams>,
    pub gamma0: Vec<f64>,
    pub beta0: Vec<f64>,
    pub omega: Vec<f64>,
    pub b: f64,
    pub alpha: f64,
}

impl NetParams {
    pub fn zeros(shape: NetShape) -> Self {
        let layers = (0..shape.hidden_layers)
            .map(|l| LayerParams {
                w: vec![0.0; shape.width * shape.fan_in(l)],
                gamma: vec![0.0; shape.width],
                beta: vec![0.0; shape.width],
            })
            .collect();
        NetParams {
            layers,
            gamma0: vec![0.0; shape.input_dim],
            beta0: vec![0.0; shape.input_dim],
            omega: vec![0.0; shape.width],
            b: 0.0,
            alpha: 0.0,
        }
    }

    pub fn flat_len(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.gamma.len() + l.beta.len())
            .sum::<usize>()
            + self.gamma0.len()
            + self.beta0.len()
            + self.omega.len()
            + 2
    }

    /// Copies every parameter into `out` in the fixed flattening order.
    pub fn write_flat(&self, out: &mut [f64]) {
        let mut k = 0;
        let mut push = |src: &[f64], out: &mut [f64]| {
            out[k..k + src.len()].copy_from_slice(src);
            k += src.len();
        };
        for l in &self.layers {
            push(&l.w, out);
            push(&l.gamma, out);
            push(&l.beta, out);
        }
        push(&self.gamma0, out);
        push(&self.beta0, out);
        push(&self.omega, out);
        out[k] = self.b;
        out[k + 1] = self.alpha;
    }

    /// Reads every parameter back from the fixed flattening order.
    pub fn read_flat(&mut self, data: &[f64]) {
        let mut k = 0;
        let mut pull = |dst: &mut [f64], data: &[f64]| {
            dst.copy_from_slice(&data[k..k + dst.len()]);
            k += dst.len();
        };
        for l in &mut self.layers {
            pull(&mut l.w, data);
            pull(&mut l.gamma, data);
            pull(&mut l.beta, data);
        }
        pull(&mut self.gamma0, data);
        pull(&mut self.beta0, data);
        pull(&mut self.omega, data);
        self.b = data[k];
        self.alpha = data[k + 1];
    }

    /// `self += other`, entry by entry (used to fold per-chunk gradients).
    pub fn add_assign(&mut self, other: &NetParams) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.w.iter_mut().zip(&b.w) {
                *x += y;
            }
            for (x, y) in a.gamma.iter_mut().zip(&b.gamma) {
                *x += y;
            }
            for (x, y) in a.beta.iter_mut().zip(&b.beta) {
                *x += y;
            }
        }
        for (x, y) in self.gamma0.iter_mut().zip(&other.gamma0) {
            *x += y;
        }
        for (x, y) in self.beta0.iter_mut().zip(&other.beta0) {
            *x += y;
        }
        for (x, y) in self.omega.iter_mut().zip(&other.omega) {
            *x += y;
        }
        self.b += other.b;
        self.alpha += other.alpha;
    }
}

/// Normalization statistics of one hidden layer (mean and biased variance
/// over the batch dimension).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// One net in the backward recursion, tied to a concrete timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct TimestepNet {
    pub shape: NetShape,
    pub params: NetParams,
    /// Running normalization statistics used outside training.
    pub running: Vec<LayerStats>,
    /// Frozen whitening mean of the input features.
    pub mu0: Vec<f64>,
    /// Frozen whitening scale `√(var+ε)` of the input features.
    pub sd0: Vec<f64>,
    /// Timestep this net belongs to.
    pub timestep: usize,
    /// Timestep whose value function feeds this net (`timestep + eta`).
    pub parent_index: usize,
    /// Recursion stride `η = parent_index − timestep`.
    pub eta: usize,
}

fn uniform_symmetric(rng: &mut impl rand::RngCore, bound: f64) -> f64 {
    // 53 uniform mantissa bits mapped to [0,1), then to (−bound, bound).
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (2.0 * u - 1.0) * bound
}

impl TimestepNet {
    /// Freshly initialized net: linear weights uniform on
    /// ±1/√(fan_in+fan_out), normalization scales 1, shifts 0, leverage
    /// α = 1.  The draw order (layer by layer, row-major, then the output
    /// weights) is part of the determinism contract.
    pub fn fresh(
        shape: NetShape,
        timestep: usize,
        parent_index: usize,
        seed: u64,
        member: usize,
    ) -> Self {
        let mut rng = rng::derived_rng(
            seed,
            [rng::purpose::WEIGHT_INIT, member as u64, timestep as u64],
        );
        let mut params = NetParams::zeros(shape);
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let bound = 1.0 / ((shape.width + shape.fan_in(l)) as f64).sqrt();
            for w in layer.w.iter_mut() {
                *w = uniform_symmetric(&mut rng, bound);
            }
            layer.gamma.fill(1.0);
        }
        let bound = 1.0 / ((shape.width + 1) as f64).sqrt();
        for w in params.omega.iter_mut() {
            *w = uniform_symmetric(&mut rng, bound);
        }
        params.gamma0.fill(1.0);
        params.alpha = 1.0;
        let running = (0..shape.hidden_layers)
            .map(|_| LayerStats {
                mu: vec![0.0; shape.width],
                var: vec![1.0; shape.width],
            })
            .collect();
        TimestepNet {
            shape,
            params,
            running,
            mu0: vec![0.0; shape.input_dim],
            sd0: vec![1.0; shape.input_dim],
            timestep,
            parent_index,
            eta: parent_index - timestep,
        }
    }

    /// New net warm-started from an already-trained parent: every parameter
    /// (including α) and the running statistics carry over; only the
    /// timestep wiring changes.  The input whitening must be reset for the
    /// new timestep's features before training.
    pub fn inherit(parent: &TimestepNet, timestep: usize, parent_index: usize) -> Self {
        TimestepNet {
            shape: parent.shape,
            params: parent.params.clone(),
            running: parent.running.clone(),
            mu0: parent.mu0.clone(),
            sd0: parent.sd0.clone(),
            timestep,
            parent_index,
            eta: parent_index - timestep,
        }
    }

    /// Freezes the input whitening to the mean/scale of the full feature
    /// set this net will train on.
    pub fn set_input_whitening(&mut self, feats: &FeatureBatch) -> Result<(), NetError> {
        if feats.len < 2 {
            return Err(NetError::DegenerateBatch { len: feats.len });
        }
        let din = self.shape.input_dim;
        if feats.input_dim() != din {
            return Err(NetError::ShapeMismatch(format!(
                "features have input dim {}, net expects {din}",
                feats.input_dim()
            )));
        }
        let mut mean = vec![0.0; din];
        let mut sq = vec![0.0; din];
        let mut z0 = vec![0.0; din];
        for m in 0..feats.len {
            feats.write_z0(m, &mut z0);
            for (j, &v) in z0.iter().enumerate() {
                mean[j] += v;
                sq[j] += v * v;
            }
        }
        let inv_n = 1.0 / feats.len as f64;
        for j in 0..din {
            mean[j] *= inv_n;
            let var = (sq[j] * inv_n - mean[j] * mean[j]).max(0.0);
            self.mu0[j] = mean[j];
            // A component whose samples are all identical (every path sits
            // at the same spot, e.g. the first timestep) carries no scale
            // information; keep the current scale — for a warm-started net
            // that is the fit from the adjacent timestep — instead of
            // collapsing to the degenerate-variance fallback.
            if var > DEGENERATE_VAR_REL * (1.0 + mean[j] * mean[j]) {
                self.sd0[j] = (var + BN_EPS).sqrt();
            }
        }
        Ok(())
    }

    /// Blends freshly measured batch statistics into the running ones:
    /// `running ← (1−rate)·running + rate·batch`.  A rate of 1 replaces
    /// them outright (how the very first training step seeds them).
    pub fn update_running_stats(&mut self, batch: &[LayerStats], rate: f64) {
        for (run, new) in self.running.iter_mut().zip(batch) {
            for (r, &b) in run.mu.iter_mut().zip(&new.mu) {
                *r = (1.0 - rate) * *r + rate * b;
            }
            for (r, &b) in run.var.iter_mut().zip(&new.var) {
                *r = (1.0 - rate) * *r + rate * b;
            }
        }
    }
}

/// Network inputs for a block of states at one timestep: the states
/// themselves, the raw payoff and its gradient, and the parent value
/// function with its gradient evaluated at the same states.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub d: usize,
    pub len: usize,
    /// `len × d` states.
    pub s: Vec<f64>,
    /// Raw payoff `g(s)` per state.
    pub g: Vec<f64>,
    /// `len × d` payoff gradient.
    pub g_grad: Vec<f64>,
    /// Parent value `y^{n+η}(s)` per state.
    pub y_parent: Vec<f64>,
    /// `len × d` parent value gradient.
    pub grad_y_parent: Vec<f64>,
}

impl FeatureBatch {
    pub fn input_dim(&self) -> usize {
        self.d + 2
    }

    /// Writes the net input vector `(s, g, y_parent)` of sample `m`.
    pub fn write_z0(&self, m: usize, out: &mut [f64]) {
        let d = self.d;
        out[..d].copy_from_slice(&self.s[m * d..(m + 1) * d]);
        out[d] = self.g[m];
        out[d + 1] = self.y_parent[m];
    }

    /// Writes the input tangent `(a, ∇g·a, ∇y_parent·a)` of sample `m`
    /// along the direction `a` and returns `∇y_parent·a`.
    pub fn write_z0_tangent(&self, m: usize, a: &[f64], out: &mut [f64]) -> f64 {
        let d = self.d;
        out[..d].copy_from_slice(a);
        let mut gdot = 0.0;
        let mut ydot = 0.0;
        for i in 0..d {
            gdot += self.g_grad[m * d + i] * a[i];
            ydot += self.grad_y_parent[m * d + i] * a[i];
        }
        out[d] = gdot;
        out[d + 1] = ydot;
        ydot
    }
}

/// Layer-major forward pass over a minibatch that measures the mean and
/// biased variance entering each normalization.  Statistics of layer `l`
/// normalize the activations that feed layer `l+1`, so the pass is
/// inherently sequential in depth.  Fails on batches of fewer than two
/// samples, whose variance is degenerate.
pub fn batch_stats(
    net: &TimestepNet,
    feats: &FeatureBatch,
    batch: &[usize],
) -> Result<Vec<LayerStats>, NetError> {
    let bsz = batch.len();
    if bsz < 2 {
        return Err(NetError::DegenerateBatch { len: bsz });
    }
    let shape = net.shape;
    let din = shape.input_dim;
    let w = shape.width;
    let p = &net.params;

    // Whitened inputs for the whole batch.
    let mut x = vec![0.0; bsz * din];
    let mut z0 = vec![0.0; din];
    for (row, &m) in batch.iter().enumerate() {
        feats.write_z0(m, &mut z0);
        for j in 0..din {
            x[row * din + j] =
                p.gamma0[j] * (z0[j] - net.mu0[j]) / net.sd0[j] + p.beta0[j];
        }
    }

    let mut stats = Vec::with_capacity(shape.hidden_layers);
    let mut z = vec![0.0; bsz * w];
    for (l, layer) in p.layers.iter().enumerate() {
        let fan_in = shape.fan_in(l);
        for row in 0..bsz {
            let xin = &x[row * fan_in..(row + 1) * fan_in];
            for j in 0..w {
                let wrow = &layer.w[j * fan_in..(j + 1) * fan_in];
                z[row * w + j] = dot(wrow, xin);
            }
        }
        let mut mu = vec![0.0; w];
        let mut var = vec![0.0; w];
        for row in 0..bsz {
            for j in 0..w {
                mu[j] += z[row * w + j];
            }
        }
        let inv_n = 1.0 / bsz as f64;
        for m in mu.iter_mut() {
            *m *= inv_n;
        }
        for row in 0..bsz {
            for j in 0..w {
                let c = z[row * w + j] - mu[j];
                var[j] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v *= inv_n;
        }
        // Normalize + ReLU to produce the next layer's input.
        let mut xnext = vec![0.0; bsz * w];
        for row in 0..bsz {
            for j in 0..w {
                let inv = 1.0 / norm_scale(mu[j], var[j]);
                let h = layer.gamma[j] * (z[row * w + j] - mu[j]) * inv + layer.beta[j];
                xnext[row * w + j] = h.max(0.0);
            }
        }
        x = xnext;
        stats.push(LayerStats { mu, var });
    }
    Ok(stats)
}

/// Training inputs beyond the features themselves: the per-sample tangent
/// direction, the regression targets, and the residual's growth factor.
pub struct LossInputs<'a> {
    pub feats: &'a FeatureBatch,
    /// `len × d` input direction per sample (σᵢ·Sᵢ·ΔWᵢ in the backward
    /// recursion's loss).
    pub tangent_dir: &'a [f64],
    /// Regression target per sample.
    pub v_next: &'a [f64],
    /// Coefficient c₁ multiplying the value in the residual
    /// `R = c₁·y + ẏ − v` (1 + rΔt in the recursion).
    pub growth: f64,
    /// Timestep spacing Δt, so the net contribution enters as η·Δt·F.
    pub dt: f64,
}

/// Per-sample workspace for the fused forward/tangent/reverse sweep.
struct Scratch {
    z0: Vec<f64>,
    zt0: Vec<f64>,
    /// Whitened input and its tangent.
    x0: Vec<f64>,
    xt0: Vec<f64>,
    /// Normalized pre-scale values (z−μ)/√(var+ε) per layer.
    zhat: Vec<Vec<f64>>,
    /// Tangent of the same, ż/√(var+ε).
    zthat: Vec<Vec<f64>>,
    /// Post-ReLU activations and tangents per layer.
    x: Vec<Vec<f64>>,
    xt: Vec<Vec<f64>>,
    /// Reverse-sweep buffers.
    xb: Vec<f64>,
    xh: Vec<f64>,
    hb: Vec<f64>,
    hh: Vec<f64>,
}

impl Scratch {
    fn new(shape: NetShape) -> Self {
        let mk = || {
            (0..shape.hidden_layers)
                .map(|_| vec![0.0; shape.width])
                .collect::<Vec<_>>()
        };
        Scratch {
            z0: vec![0.0; shape.input_dim],
            zt0: vec![0.0; shape.input_dim],
            x0: vec![0.0; shape.input_dim],
            xt0: vec![0.0; shape.input_dim],
            zhat: mk(),
            zthat: mk(),
            x: mk(),
            xt: mk(),
            xb: vec![0.0; shape.width.max(shape.input_dim)],
            xh: vec![0.0; shape.width.max(shape.input_dim)],
            hb: vec![0.0; shape.width],
            hh: vec![0.0; shape.width],
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Forward primal + forward tangent of one sample under fixed statistics.
/// Returns `(y, ẏ, F, Ḟ, ẏ_parent)` and leaves all intermediates in the
/// scratch for a subsequent reverse sweep.
fn forward_one(
    net: &TimestepNet,
    feats: &FeatureBatch,
    m: usize,
    a: &[f64],
    stats: &[LayerStats],
    eta_dt: f64,
    sc: &mut Scratch,
) -> (f64, f64, f64, f64, f64) {
    let p = &net.params;
    let shape = net.shape;
    feats.write_z0(m, &mut sc.z0);
    let ytpar = feats.write_z0_tangent(m, a, &mut sc.zt0);
    for j in 0..shape.input_dim {
        let inv = 1.0 / net.sd0[j];
        sc.x0[j] = p.gamma0[j] * (sc.z0[j] - net.mu0[j]) * inv + p.beta0[j];
        sc.xt0[j] = p.gamma0[j] * sc.zt0[j] * inv;
    }
    let w = shape.width;
    for (l, layer) in p.layers.iter().enumerate() {
        let fan_in = shape.fan_in(l);
        let st = &stats[l];
        // Split borrows: layer l reads activations l−1 and writes slot l.
        let (x_in_part, x_out_part) = sc.x.split_at_mut(l);
        let (xt_in_part, xt_out_part) = sc.xt.split_at_mut(l);
        let (xin, xtin): (&[f64], &[f64]) = if l == 0 {
            (&sc.x0, &sc.xt0)
        } else {
            (&x_in_part[l - 1], &xt_in_part[l - 1])
        };
        let xout = &mut x_out_part[0];
        let xtout = &mut xt_out_part[0];
        for j in 0..w {
            let wrow = &layer.w[j * fan_in..(j + 1) * fan_in];
            let z = dot(wrow, xin);
            let zt = dot(wrow, xtin);
            let inv = 1.0 / norm_scale(st.mu[j], st.var[j]);
            let zh = (z - st.mu[j]) * inv;
            let zth = zt * inv;
            sc.zhat[l][j] = zh;
            sc.zthat[l][j] = zth;
            let h = layer.gamma[j] * zh + layer.beta[j];
            let ht = layer.gamma[j] * zth;
            if h > 0.0 {
                xout[j] = h;
                xtout[j] = ht;
            } else {
                xout[j] = 0.0;
                xtout[j] = 0.0;
            }
        }
    }
    let last = shape.hidden_layers - 1;
    let f = dot(&p.omega, &sc.x[last]) + p.b;
    let ft = dot(&p.omega, &sc.xt[last]);
    let ypar = feats.y_parent[m];
    let y = p.alpha * (ypar + eta_dt * f);
    let yt = p.alpha * (ytpar + eta_dt * ft);
    (y, yt, f, ft, ytpar)
}

/// Squared-residual loss `Σ_m R_m²` with `R = c₁·y + ẏ − v` over the given
/// minibatch rows, plus its exact gradient in every parameter.  `stats`
/// supplies the normalization constants (batch statistics during training,
/// running statistics otherwise) and is treated as data: the gradient is
/// exact for the loss *at fixed statistics*, which is the stop-gradient
/// convention used throughout.
///
/// The tangent variable ẏ makes this second-order: the reverse sweep
/// propagates an adjoint pair — one for each primal variable and one for
/// its tangent — and linear-layer weight gradients pick up both
/// outer-product terms `z̄⊗x + ẑ⊗ẋ`.
pub fn loss_and_param_grads(
    net: &TimestepNet,
    inputs: &LossInputs<'_>,
    batch: &[usize],
    stats: &[LayerStats],
) -> Result<(f64, NetParams), NetError> {
    let feats = inputs.feats;
    if stats.len() != net.shape.hidden_layers {
        return Err(NetError::ShapeMismatch(format!(
            "{} stat layers for {} hidden layers",
            stats.len(),
            net.shape.hidden_layers
        )));
    }
    if feats.input_dim() != net.shape.input_dim {
        return Err(NetError::ShapeMismatch(format!(
            "features have input dim {}, net expects {}",
            feats.input_dim(),
            net.shape.input_dim
        )));
    }
    let eta_dt = net.eta as f64 * inputs.dt;
    let d = feats.d;
    let shape = net.shape;
    let w = shape.width;

    // Deterministic parallelism: fixed-size chunks of the batch produce
    // partial (loss, grads) folded in chunk order.
    const CHUNK: usize = 64;
    let n_chunks = batch.len().div_ceil(CHUNK);
    let partials = parallel::map_indexed(n_chunks, |c| {
        let rows = &batch[c * CHUNK..((c + 1) * CHUNK).min(batch.len())];
        let mut sc = Scratch::new(shape);
        let mut grads = NetParams::zeros(shape);
        let mut loss = 0.0;
        for &m in rows {
            let a = &inputs.tangent_dir[m * d..(m + 1) * d];
            let (y, yt, f, ft, ytpar) =
                forward_one(net, feats, m, a, stats, eta_dt, &mut sc);
            let residual = inputs.growth * y + yt - inputs.v_next[m];
            loss += residual * residual;

            // Adjoint seeds: ∂L/∂y and ∂L/∂ẏ of this sample.
            let yb = 2.0 * residual * inputs.growth;
            let yh = 2.0 * residual;

            let p = &net.params;
            grads.alpha += yb * (feats.y_parent[m] + eta_dt * f)
                + yh * (ytpar + eta_dt * ft);
            let fb = yb * p.alpha * eta_dt;
            let fh = yh * p.alpha * eta_dt;
            let last = shape.hidden_layers - 1;
            for j in 0..w {
                grads.omega[j] += fb * sc.x[last][j] + fh * sc.xt[last][j];
                sc.xb[j] = fb * p.omega[j];
                sc.xh[j] = fh * p.omega[j];
            }
            grads.b += fb;

            for l in (0..shape.hidden_layers).rev() {
                let layer = &p.layers[l];
                let glayer = &mut grads.layers[l];
                let st = &stats[l];
                let fan_in = shape.fan_in(l);
                for j in 0..w {
                    // ReLU′(0) = 0: gradient passes only where the
                    // activation is strictly positive.
                    let open = sc.x[l][j] > 0.0;
                    let hb = if open { sc.xb[j] } else { 0.0 };
                    let hh = if open { sc.xh[j] } else { 0.0 };
                    glayer.gamma[j] += hb * sc.zhat[l][j] + hh * sc.zthat[l][j];
                    glayer.beta[j] += hb;
                    let inv = 1.0 / norm_scale(st.mu[j], st.var[j]);
                    sc.hb[j] = layer.gamma[j] * inv * hb;
                    sc.hh[j] = layer.gamma[j] * inv * hh;
                }
                // Weight gradient and pushback to the previous layer.
                {
                    let (xin, xtin): (&[f64], &[f64]) = if l == 0 {
                        (&sc.x0, &sc.xt0)
                    } else {
                        (&sc.x[l - 1], &sc.xt[l - 1])
                    };
                    for j in 0..w {
                        let zb = sc.hb[j];
                        let zh = sc.hh[j];
                        let grow = &mut glayer.w[j * fan_in..(j + 1) * fan_in];
                        for k in 0..fan_in {
                            grow[k] += zb * xin[k] + zh * xtin[k];
                        }
                    }
                }
                for k in 0..fan_in {
                    let mut ab = 0.0;
                    let mut ah = 0.0;
                    for j in 0..w {
                        ab += sc.hb[j] * layer.w[j * fan_in + k];
                        ah += sc.hh[j] * layer.w[j * fan_in + k];
                    }
                    sc.xb[k] = ab;
                    sc.xh[k] = ah;
                }
            }
            // Input normalization: γ⁰/β⁰ gradients; features absorb the rest.
            for j in 0..shape.input_dim {
                let inv = 1.0 / net.sd0[j];
                grads.gamma0[j] += sc.xb[j] * (sc.z0[j] - net.mu0[j]) * inv
                    + sc.xh[j] * sc.zt0[j] * inv;
                grads.beta0[j] += sc.xb[j];
            }
        }
        (loss, grads)
    });

    let mut loss = 0.0;
    let mut grads = NetParams::zeros(shape);
    for (l, g) in partials {
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

/// Value `y` and input gradient `∇_s y` for every feature row, using the
/// net's running statistics.  The gradient routes through all three input
/// channels: the state directly, the payoff feature via ∇g, and the parent
/// value feature via ∇y_parent:
///
/// ```text
/// ∇y = α·[ ∇y_par + η·Δt·( ∂F/∂s + ∂F/∂g·∇g + ∂F/∂y_par·∇y_par ) ]
/// ```
pub fn infer_values_and_grads(
    net: &TimestepNet,
    feats: &FeatureBatch,
    dt: f64,
    out_y: &mut [f64],
    out_dy: &mut [f64],
) {
    let d = feats.d;
    let shape = net.shape;
    let din = shape.input_dim;
    let w = shape.width;
    let eta_dt = net.eta as f64 * dt;
    assert_eq!(out_y.len(), feats.len);
    assert_eq!(out_dy.len(), feats.len * d);
    assert_eq!(din, feats.input_dim(), "feature/net input dim mismatch");

    const CHUNK: usize = 256;
    let stats = &net.running;
    let p = &net.params;
    let ys: &mut [f64] = out_y;
    let dys: &mut [f64] = out_dy;
    parallel::for_each_chunk_pair_mut(ys, CHUNK, dys, CHUNK * d, |c, yc, dyc| {
        let base = c * CHUNK;
        let mut z0 = vec![0.0; din];
        let mut x0 = vec![0.0; din];
        let mut x = vec![vec![0.0; w]; shape.hidden_layers];
        let mut xb = vec![0.0; w.max(din)];
        let mut hb = vec![0.0; w];
        let mut dfdz0 = vec![0.0; din];
        for row in 0..yc.len() {
            let m = base + row;
            feats.write_z0(m, &mut z0);
            // Forward under running stats.
            for j in 0..din {
                x0[j] = p.gamma0[j] * (z0[j] - net.mu0[j]) / net.sd0[j] + p.beta0[j];
            }
            for l in 0..shape.hidden_layers {
                let layer = &p.layers[l];
                let st = &stats[l];
                let fan_in = shape.fan_in(l);
                let (x_in_part, x_out_part) = x.split_at_mut(l);
                let xin: &[f64] = if l == 0 { &x0 } else { &x_in_part[l - 1] };
                let xout = &mut x_out_part[0];
                for j in 0..w {
                    let z = dot(&layer.w[j * fan_in..(j + 1) * fan_in], xin);
                    let inv = 1.0 / norm_scale(st.mu[j], st.var[j]);
                    let h = layer.gamma[j] * (z - st.mu[j]) * inv + layer.beta[j];
                    xout[j] = h.max(0.0);
                }
            }
            let last = shape.hidden_layers - 1;
            let f = dot(&p.omega, &x[last]) + p.b;
            yc[row] = p.alpha * (feats.y_parent[m] + eta_dt * f);

            // Reverse sweep for ∂F/∂z0.
            xb[..w].copy_from_slice(&p.omega);
            for l in (0..shape.hidden_layers).rev() {
                let layer = &p.layers[l];
                let st = &stats[l];
                let fan_in = shape.fan_in(l);
                for j in 0..w {
                    let inv = 1.0 / norm_scale(st.mu[j], st.var[j]);
                    hb[j] = if x[l][j] > 0.0 {
                        layer.gamma[j] * inv * xb[j]
                    } else {
                        0.0
                    };
                }
                for k in 0..fan_in {
                    let mut acc = 0.0;
                    for j in 0..w {
                        acc += hb[j] * layer.w[j * fan_in + k];
                    }
                    xb[k] = acc;
                }
            }
            // Through the input whitening to raw feature space.
            for j in 0..din {
                dfdz0[j] = p.gamma0[j] / net.sd0[j] * xb[j];
            }
            let dfg = dfdz0[d];
            let dfy = dfdz0[d + 1];
            for i in 0..d {
                let gypar = feats.grad_y_parent[m * d + i];
                let chain =
                    dfdz0[i] + dfg * feats.g_grad[m * d + i] + dfy * gypar;
                dyc[row * d + i] = p.alpha * (gypar + eta_dt * chain);
            }
        }
    });
}

/// All nets of one ensemble member, keyed by timestep.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MemberNets {
    pub nets: BTreeMap<usize, TimestepNet>,
}

impl MemberNets {
    /// Timesteps touched when evaluating `y^n`: `n`, its parent, and so on
    /// up to (but excluding) the expiry index `n_steps`.
    pub fn chain_indices(&self, n: usize, n_steps: usize) -> Result<Vec<usize>, NetError> {
        let mut chain = Vec::new();
        let mut k = n;
        while k < n_steps {
            let net = self.nets.get(&k).ok_or(NetError::MissingNet { timestep: k })?;
            chain.push(k);
            k = net.parent_index;
        }
        Ok(chain)
    }

    /// Evaluates `y^n` and `∇_s y^n` at a block of states by walking the
    /// recursion down from the smoothed payoff at expiry.  `states` is
    /// `len × d` row-major.
    pub fn stack_value_and_delta(
        &self,
        n: usize,
        states: &[f64],
        d: usize,
        payoff: &PayoffSpec,
        kappa: f64,
        dt: f64,
        n_steps: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        let chain = self.chain_indices(n, n_steps)?;
        let len = states.len() / d;

        // Base features shared by every level of the chain.
        let mut feats = FeatureBatch {
            d,
            len,
            s: states.to_vec(),
            g: vec![0.0; len],
            g_grad: vec![0.0; len * d],
            y_parent: vec![0.0; len],
            grad_y_parent: vec![0.0; len * d],
        };
        let mut grad = vec![0.0; d];
        for m in 0..len {
            let s = &states[m * d..(m + 1) * d];
            feats.g[m] = payoff.g(s);
            payoff.g_grad(s, &mut grad);
            feats.g_grad[m * d..(m + 1) * d].copy_from_slice(&grad);
            feats.y_parent[m] = payoff.smoothed(s, kappa, &mut grad);
            feats.grad_y_parent[m * d..(m + 1) * d].copy_from_slice(&grad);
        }

        let mut y = vec![0.0; len];
        let mut dy = vec![0.0; len * d];
        for &idx in chain.iter().rev() {
            let net = &self.nets[&idx];
            infer_values_and_grads(net, &feats, dt, &mut y, &mut dy);
            if idx != n {
                feats.y_parent.copy_from_slice(&y);
                feats.grad_y_parent.copy_from_slice(&dy);
            }
        }
        if chain.is_empty() {
            // y^N is the smoothed payoff itself.
            y.copy_from_slice(&feats.y_parent);
            dy.copy_from_slice(&feats.grad_y_parent);
        }
        Ok((y, dy))
    }
}

/// A trained model: `C` independently trained members plus everything
/// needed to evaluate them (contract, smoothing, time grid).
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub market: crate::market::MarketParams,
    pub payoff: PayoffSpec,
    /// Softplus smoothing sharpness κ of the expiry payoff.
    pub kappa: f64,
    /// Number of timesteps N (expiry index).
    pub n_steps: usize,
    /// Anchor stride J of the recursion.
    pub j_anchor: usize,
    /// Seed the model was trained with (recorded for reproducibility).
    pub seed: u64,
    pub members: Vec<MemberNets>,
}

impl EnsembleModel {
    pub fn dt(&self) -> f64 {
        self.market.maturity / self.n_steps as f64
    }

    /// Ensemble-averaged value and spatial gradient at one timestep.
    pub fn value_and_delta(
        &self,
        n: usize,
        states: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>), NetError> {
        let d = self.market.d;
        let len = if d == 0 { 0 } else { states.len() / d };
        let mut y = vec![0.0; len];
        let mut dy = vec![0.0; len * d];
        for member in &self.members {
            let (my, mdy) = member.stack_value_and_delta(
                n,
                states,
                d,
                &self.payoff,
                self.kappa,
                self.dt(),
                self.n_steps,
            )?;
            for (acc, v) in y.iter_mut().zip(&my) {
                *acc += v;
            }
            for (acc, v) in dy.iter_mut().zip(&mdy) {
                *acc += v;
            }
        }
        let inv = 1.0 / self.members.len() as f64;
        y.iter_mut().for_each(|v| *v *= inv);
        dy.iter_mut().for_each(|v| *v *= inv);
        Ok((y, dy))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_shape() -> NetShape {
        NetShape {
            input_dim: 4, // d = 2
            width: 5,
            hidden_layers: 2,
        }
    }

    fn test_net(seed: u64) -> TimestepNet {
        let mut net = TimestepNet::fresh(test_shape(), 3, 5, seed, 0);
        // Give the normalization parameters non-trivial values so gradient
        // checks exercise every term.
        let mut state = seed.wrapping_mul(0x9e3779b97f4a7c15);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for layer in net.params.layers.iter_mut() {
            for g in layer.gamma.iter_mut() {
                *g = 1.0 + 0.3 * next();
            }
            for b in layer.beta.iter_mut() {
                *b = 0.2 * next();
            }
        }
        for g in net.params.gamma0.iter_mut() {
            *g = 1.0 + 0.3 * next();
        }
        for b in net.params.beta0.iter_mut() {
            *b = 0.2 * next();
        }
        net.params.b = 0.1;
        net.params.alpha = 1.07;
        for st in net.running.iter_mut() {
            for m in st.mu.iter_mut() {
                *m = 0.1 * next();
            }
            for v in st.var.iter_mut() {
                *v = 0.5 + next().abs();
            }
        }
        for j in 0..net.shape.input_dim {
            net.mu0[j] = 0.2 * next();
            net.sd0[j] = 0.8 + next().abs();
        }
        net
    }

    fn test_features(len: usize, seed: u64) -> (FeatureBatch, Vec<f64>, Vec<f64>) {
        let d = 2;
        let mut state = seed.wrapping_add(77).wrapping_mul(0x9e3779b97f4a7c15);
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let mut feats = FeatureBatch {
            d,
            len,
            s: Vec::new(),
            g: Vec::new(),
            g_grad: Vec::new(),
            y_parent: Vec::new(),
            grad_y_parent: Vec::new(),
        };
        let mut tangent = Vec::new();
        let mut v_next = Vec::new();
        for _ in 0..len {
            for _ in 0..d {
                feats.s.push(80.0 + 40.0 * next());
                feats.g_grad.push(next() - 0.5);
                feats.grad_y_parent.push(next() - 0.5);
                tangent.push(2.0 * (next() - 0.5));
            }
            feats.g.push(10.0 * (next() - 0.5));
            feats.y_parent.push(5.0 * next());
            v_next.push(5.0 * next());
        }
        (feats, tangent, v_next)
    }

    /// Plain scalar re-implementation of the forward value used as an
    /// independent oracle for the kernels.
    fn reference_value(
        net: &TimestepNet,
        z0: &[f64],
        y_parent: f64,
        stats: &[LayerStats],
        eta_dt: f64,
    ) -> f64 {
        let p = &net.params;
        let mut x: Vec<f64> = z0
            .iter()
            .enumerate()
            .map(|(j, &z)| p.gamma0[j] * (z - net.mu0[j]) / net.sd0[j] + p.beta0[j])
            .collect();
        for (l, layer) in p.layers.iter().enumerate() {
            let mut out = vec![0.0; net.shape.width];
            for (j, o) in out.iter_mut().enumerate() {
                let mut z = 0.0;
                for (k, &xv) in x.iter().enumerate() {
                    z += layer.w[j * x.len() + k] * xv;
                }
                let inv = 1.0 / norm_scale(stats[l].mu[j], stats[l].var[j]);
                let h = layer.gamma[j] * (z - stats[l].mu[j]) * inv + layer.beta[j];
                *o = h.max(0.0);
            }
            x = out;
        }
        let mut f = p.b;
        for (j, &xv) in x.iter().enumerate() {
            f += p.omega[j] * xv;
        }
        p.alpha * (y_parent + eta_dt * f)
    }

    fn loss_reference(
        net: &TimestepNet,
        inputs: &LossInputs<'_>,
        batch: &[usize],
        stats: &[LayerStats],
    ) -> f64 {
        let feats = inputs.feats;
        let d = feats.d;
        let din = feats.input_dim();
        let eta_dt = net.eta as f64 * inputs.dt;
        let mut loss = 0.0;
        for &m in batch {
            let mut z0 = vec![0.0; din];
            feats.write_z0(m, &mut z0);
            let a = &inputs.tangent_dir[m * d..(m + 1) * d];
            // Directional derivative of the fixed-stats forward map by a
            // two-sided difference in feature space.
            let h = 1e-6;
            let mut z0p = z0.clone();
            let mut z0m = z0.clone();
            let mut zt0 = vec![0.0; din];
            let ytpar = feats.write_z0_tangent(m, a, &mut zt0);
            let mut ypar_p = feats.y_parent[m];
            let mut ypar_m = feats.y_parent[m];
            for j in 0..din {
                z0p[j] += h * zt0[j];
                z0m[j] -= h * zt0[j];
            }
            ypar_p += h * ytpar;
            ypar_m -= h * ytpar;
            let y = reference_value(net, &z0, feats.y_parent[m], stats, eta_dt);
            let yp = reference_value(net, &z0p, ypar_p, stats, eta_dt);
            let ym = reference_value(net, &z0m, ypar_m, stats, eta_dt);
            let yt = (yp - ym) / (2.0 * h);
            let r = inputs.growth * y + yt - inputs.v_next[m];
            loss += r * r;
        }
        loss
    }

    #[test]
    fn initialization_is_deterministic_and_bounded() {
        let a = TimestepNet::fresh(test_shape(), 3, 5, 42, 1);
        let b = TimestepNet::fresh(test_shape(), 3, 5, 42, 1);
        assert_eq!(a, b);
        let c = TimestepNet::fresh(test_shape(), 3, 5, 43, 1);
        assert_ne!(a.params.layers[0].w, c.params.layers[0].w);
        let bound0 = 1.0 / ((5 + 4) as f64).sqrt();
        assert!(a.params.layers[0].w.iter().all(|w| w.abs() <= bound0));
        let bound1 = 1.0 / ((5 + 5) as f64).sqrt();
        assert!(a.params.layers[1].w.iter().all(|w| w.abs() <= bound1));
        assert!(a.params.layers[0].w.iter().any(|w| w.abs() > 0.01));
        assert_eq!(a.params.alpha, 1.0);
        assert_eq!(a.params.b, 0.0);
        assert!(a.params.layers[0].gamma.iter().all(|&g| g == 1.0));
        assert_eq!(a.eta, 2);
    }

    #[test]
    fn batch_statistics_are_self_consistent() {
        // Re-deriving each layer's stats from fixed-stats forwards of the
        // same batch must reproduce them (layer-major and sample-major
        // paths agree).
        let net = test_net(7);
        let (feats, _, _) = test_features(50, 7);
        let batch: Vec<usize> = (0..50).collect();
        let stats = batch_stats(&net, &feats, &batch).unwrap();
        let din = feats.input_dim();
        let w = net.shape.width;
        // Forward every sample under the measured stats and re-measure.
        let mut zs: Vec<Vec<f64>> = vec![Vec::new(); net.shape.hidden_layers];
        for &m in &batch {
            let mut z0 = vec![0.0; din];
            feats.write_z0(m, &mut z0);
            let p = &net.params;
            let mut x: Vec<f64> = (0..din)
                .map(|j| p.gamma0[j] * (z0[j] - net.mu0[j]) / net.sd0[j] + p.beta0[j])
                .collect();
            for (l, layer) in p.layers.iter().enumerate() {
                let fan_in = x.len();
                let mut znext = vec![0.0; w];
                for (j, zn) in znext.iter_mut().enumerate() {
                    for k in 0..fan_in {
                        *zn += layer.w[j * fan_in + k] * x[k];
                    }
                }
                zs[l].extend_from_slice(&znext);
                let mut xnext = vec![0.0; w];
                for j in 0..w {
                    let inv = 1.0 / norm_scale(stats[l].mu[j], stats[l].var[j]);
                    let h = layer.gamma[j] * (znext[j] - stats[l].mu[j]) * inv
                        + layer.beta[j];
                    xnext[j] = h.max(0.0);
                }
                x = xnext;
            }
        }
        for l in 0..net.shape.hidden_layers {
            for j in 0..w {
                let col: Vec<f64> = (0..batch.len()).map(|m| zs[l][m * w + j]).collect();
                let mu = col.iter().sum::<f64>() / col.len() as f64;
                let var =
                    col.iter().map(|z| (z - mu) * (z - mu)).sum::<f64>() / col.len() as f64;
                assert_relative_eq!(stats[l].mu[j], mu, epsilon = 1e-10);
                assert_relative_eq!(stats[l].var[j], var, epsilon = 1e-10, max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn single_sample_batches_are_rejected() {
        let net = test_net(1);
        let (feats, _, _) = test_features(5, 1);
        assert!(matches!(
            batch_stats(&net, &feats, &[2]),
            Err(NetError::DegenerateBatch { len: 1 })
        ));
        let mut small = feats.clone();
        small.len = 1;
        assert!(matches!(
            test_net(1).set_input_whitening(&small),
            Err(NetError::DegenerateBatch { len: 1 })
        ));
    }

    #[test]
    fn loss_matches_independent_reference() {
        let net = test_net(11);
        let (feats, tangent, v_next) = test_features(40, 11);
        let batch: Vec<usize> = (0..40).collect();
        let stats = batch_stats(&net, &feats, &batch).unwrap();
        let inputs = LossInputs {
            feats: &feats,
            tangent_dir: &tangent,
            v_next: &v_next,
            growth: 1.002,
            dt: 0.02,
        };
        let (loss, _) = loss_and_param_grads(&net, &inputs, &batch, &stats).unwrap();
        let reference = loss_reference(&net, &inputs, &batch, &stats);
        // The reference computes the tangent by finite differences, so the
        // comparison tolerance reflects that truncation, not the kernel.
        assert_relative_eq!(loss, reference, max_relative = 1e-6);
    }

    #[test]
    fn param_gradients_match_finite_differences_of_the_loss() {
        let mut net = test_net(23);
        let (feats, tangent, v_next) = test_features(24, 23);
        let batch: Vec<usize> = (0..24).collect();
        let stats = batch_stats(&net, &feats, &batch).unwrap();
        let inputs = LossInputs {
            feats: &feats,
            tangent_dir: &tangent,
            v_next: &v_next,
            growth: 1.002,
            dt: 0.02,
        };
        let (_, grads) = loss_and_param_grads(&net, &inputs, &batch, &stats).unwrap();
        let n_params = grads.flat_len();
        let mut gflat = vec![0.0; n_params];
        grads.write_flat(&mut gflat);
        let mut pflat = vec![0.0; n_params];
        net.params.write_flat(&mut pflat);

        // Probe a spread of parameters (every 7th) with central differences
        // at fixed statistics.
        for idx in (0..n_params).step_by(7) {
            let h = 1e-5 * (1.0 + pflat[idx].abs());
            let mut up = pflat.clone();
            up[idx] += h;
            net.params.read_flat(&up);
            let (lu, _) = loss_and_param_grads(&net, &inputs, &batch, &stats).unwrap();
            let mut dn = pflat.clone();
            dn[idx] -= h;
            net.params.read_flat(&dn);
            let (ld, _) = loss_and_param_grads(&net, &inputs, &batch, &stats).unwrap();
            net.params.read_flat(&pflat);
            let fd = (lu - ld) / (2.0 * h);
            let denom = gflat[idx].abs().max(fd.abs()).max(1e-5);
            assert!(
                (gflat[idx] - fd).abs() / denom <= 1e-4,
                "param {idx}: analytic {} vs fd {fd}",
                gflat[idx]
            );
        }
    }

    #[test]
    fn inferred_input_gradients_match_finite_differences() {
        let net = test_net(31);
        let (mut feats, _, _) = test_features(12, 31);
        let d = feats.d;
        let dt = 0.02;
        let mut y = vec![0.0; feats.len];
        let mut dy = vec![0.0; feats.len * d];
        infer_values_and_grads(&net, &feats, dt, &mut y, &mut dy);
        for m in 0..feats.len {
            for i in 0..d {
                let h = 1e-7 * (1.0 + feats.s[m * d + i].abs());
                let orig = feats.s[m * d + i];
                // The feature channels g and y_parent move with s according
                // to their stored gradients.
                let g0 = feats.g[m];
                let yp0 = feats.y_parent[m];
                let val = |sign: f64, feats: &mut FeatureBatch| {
                    feats.s[m * d + i] = orig + sign * h;
                    feats.g[m] = g0 + sign * h * feats.g_grad[m * d + i];
                    feats.y_parent[m] = yp0 + sign * h * feats.grad_y_parent[m * d + i];
                    let mut yy = vec![0.0; feats.len];
                    let mut dd = vec![0.0; feats.len * d];
                    infer_values_and_grads(&net, feats, dt, &mut yy, &mut dd);
                    yy[m]
                };
                let up = val(1.0, &mut feats);
                let dn = val(-1.0, &mut feats);
                feats.s[m * d + i] = orig;
                feats.g[m] = g0;
                feats.y_parent[m] = yp0;
                let fd = (up - dn) / (2.0 * h);
                let denom = dy[m * d + i].abs().max(fd.abs()).max(1e-7);
                assert!(
                    (dy[m * d + i] - fd).abs() / denom <= 1e-5,
                    "sample {m} dim {i}: analytic {} vs fd {fd}",
                    dy[m * d + i]
                );
            }
        }
    }

    #[test]
    fn tangent_pass_equals_directional_derivative() {
        let net = test_net(41);
        let (feats, tangent, _) = test_features(10, 41);
        let batch: Vec<usize> = (0..10).collect();
        let stats = batch_stats(&net, &feats, &batch).unwrap();
        let eta_dt = net.eta as f64 * 0.02;
        let mut sc = Scratch::new(net.shape);
        for &m in &batch {
            let a = &tangent[m * 2..(m + 1) * 2];
            let (_, yt, _, _, _) = forward_one(&net, &feats, m, a, &stats, eta_dt, &mut sc);
            // Independent directional derivative via the reference forward.
            let din = feats.input_dim();
            let mut z0 = vec![0.0; din];
            let mut zt0 = vec![0.0; din];
            feats.write_z0(m, &mut z0);
            let ytpar = feats.write_z0_tangent(m, a, &mut zt0);
            let h = 1e-6;
            let zp: Vec<f64> = z0.iter().zip(&zt0).map(|(z, t)| z + h * t).collect();
            let zm: Vec<f64> = z0.iter().zip(&zt0).map(|(z, t)| z - h * t).collect();
            let yp = reference_value(&net, &zp, feats.y_parent[m] + h * ytpar, &stats, eta_dt);
            let ym = reference_value(&net, &zm, feats.y_parent[m] - h * ytpar, &stats, eta_dt);
            let fd = (yp - ym) / (2.0 * h);
            assert_relative_eq!(yt, fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn running_stat_updates_blend_and_seed() {
        let mut net = test_net(5);
        let (feats, _, _) = test_features(30, 5);
        let batch: Vec<usize> = (0..30).collect();
        let stats = batch_stats(&net, &feats, &batch).unwrap();
        net.update_running_stats(&stats, 1.0);
        assert_eq!(net.running, stats);
        let before = net.running.clone();
        net.update_running_stats(&stats, 0.25);
        // Blending identical stats is a fixed point.
        for (a, b) in net.running.iter().zip(&before) {
            for (x, y) in a.mu.iter().zip(&b.mu) {
                assert_relative_eq!(x, y, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn stack_chain_grounds_in_smoothed_payoff_and_chains_nets() {
        // One net at n=2 with parent 4 = N: chain length 1; evaluating at
        // n=4 returns the smoothed payoff itself.
        let payoff = PayoffSpec::GeometricCall { strike: 100.0 };
        let shape = NetShape {
            input_dim: 3,
            width: 4,
            hidden_layers: 2,
        };
        let net = TimestepNet::fresh(shape, 2, 4, 9, 0);
        let mut member = MemberNets::default();
        member.nets.insert(2, net);
        let states = vec![95.0, 105.0, 120.0];
        let kappa = 2.0;
        let dt = 0.25;
        let (y4, dy4) = member
            .stack_value_and_delta(4, &states, 1, &payoff, kappa, dt, 4)
            .unwrap();
        for (m, &s) in states.iter().enumerate() {
            let mut grad = [0.0];
            let expect = payoff.smoothed(&[s], kappa, &mut grad);
            assert_relative_eq!(y4[m], expect, max_relative = 1e-14);
            assert_relative_eq!(dy4[m], grad[0], max_relative = 1e-14);
        }
        let (y2, _) = member
            .stack_value_and_delta(2, &states, 1, &payoff, kappa, dt, 4)
            .unwrap();
        // The net output must match a hand-chained evaluation.
        let member_net = &member.nets[&2];
        let mut feats = FeatureBatch {
            d: 1,
            len: states.len(),
            s: states.clone(),
            g: states.iter().map(|&s| payoff.g(&[s])).collect(),
            g_grad: vec![0.0; states.len()],
            y_parent: y4.clone(),
            grad_y_parent: dy4.clone(),
        };
        for (m, &s) in states.iter().enumerate() {
            let mut gr = [0.0];
            payoff.g_grad(&[s], &mut gr);
            feats.g_grad[m] = gr[0];
        }
        let mut yy = vec![0.0; states.len()];
        let mut dd = vec![0.0; states.len()];
        infer_values_and_grads(member_net, &feats, dt, &mut yy, &mut dd);
        assert_eq!(y2, yy);
        // Missing intermediate net is a hard error.
        assert!(matches!(
            member.stack_value_and_delta(1, &states, 1, &payoff, kappa, dt, 4),
            Err(NetError::MissingNet { timestep: 1 })
        ));
    }

    #[test]
    fn ensemble_average_is_the_mean_of_members() {
        let payoff = PayoffSpec::GeometricCall { strike: 100.0 };
        let shape = NetShape {
            input_dim: 3,
            width: 4,
            hidden_layers: 2,
        };
        let mut members = Vec::new();
        for c in 0..3u64 {
            let mut member = MemberNets::default();
            member.nets.insert(3, TimestepNet::fresh(shape, 3, 4, 100 + c, c as usize));
            members.push(member);
        }
        let model = EnsembleModel {
            market: crate::market::MarketParams::symmetric(
                1, 0.0, 0.02, 0.25, 0.75, 1.0, 100.0, 100.0,
            ),
            payoff,
            kappa: 2.0,
            n_steps: 4,
            j_anchor: 1,
            seed: 100,
            members,
        };
        let states = vec![90.0, 100.0, 111.0];
        let (y, dy) = model.value_and_delta(3, &states).unwrap();
        let mut acc = vec![0.0; 3];
        let mut dacc = vec![0.0; 3];
        for member in &model.members {
            let (my, mdy) = member
                .stack_value_and_delta(3, &states, 1, &model.payoff, 2.0, model.dt(), 4)
                .unwrap();
            for i in 0..3 {
                acc[i] += my[i] / 3.0;
                dacc[i] += mdy[i] / 3.0;
            }
        }
        for i in 0..3 {
            assert_relative_eq!(y[i], acc[i], max_relative = 1e-12);
            assert_relative_eq!(dy[i], dacc[i], max_relative = 1e-12);
        }
    }

    #[test]
    fn flat_round_trip_preserves_params() {
        let net = test_net(3);
        let mut flat = vec![0.0; net.params.flat_len()];
        net.params.write_flat(&mut flat);
        let mut other = NetParams::zeros(net.shape);
        other.read_flat(&flat);
        assert_eq!(net.params, other);
    }
}
