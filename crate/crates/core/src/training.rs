//! The backward training sweep: walk the timesteps from expiry to zero,
//! fitting each timestep's net ensemble to the one-step residual
//!
//! ```text
//! R_m = (1+rΔt)·y^n(S^n_m) + Σ_i σ_i·(S_i)^n_m·(∂y^n/∂s_i)·(ΔW_i)^n_m − v^{n+1}(S^{n+1}_m)
//! ```
//!
//! and maintaining path-wise state along the way: price/delta samples
//! `Y[n][m]`, `Z[n][m][i]` (ensemble-averaged, overwritten for all earlier
//! rows whenever `N−n` is a multiple of the recursion stride `J`), exercise
//! flags (`Y ≤ f`), and the blended regression targets
//!
//! ```text
//! v[n][m] = θ·Y[n][m] + (1−θ)·e^{−rΔt}·v[n+1][m]   (continued)
//!         = f(S^n_m)                                (exercised)
//! ```
//!
//! Optimization is Adam with global-norm gradient clipping, a decaying
//! learning rate, and a decaying blend rate for the normalization running
//! statistics (rate 1 at the first step, so the first minibatch seeds them).

use crate::market::{MarketParams, PayoffSpec};
use crate::netcore::{
    batch_stats, loss_and_param_grads, EnsembleModel, FeatureBatch, LossInputs, MemberNets,
    NetError, NetShape, TimestepNet,
};
use crate::parallel;
use crate::rng;
use crate::simulate::{self, PathCube, SimulateError};
use rand::RngCore;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error(transparent)]
    Simulate(#[from] SimulateError),
    #[error("member {member}, timestep {timestep}: {source}")]
    Net {
        member: usize,
        timestep: usize,
        source: NetError,
    },
    #[error("non-finite gradient at member {member}, timestep {timestep}, training step {step}")]
    NonFiniteGradient {
        member: usize,
        timestep: usize,
        step: usize,
    },
}

/// Hyperparameters of one backward sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Adam steps per timestep net.
    pub steps: usize,
    /// Minibatch size.
    pub batch: usize,
    /// Blend θ between net values (θ=1) and discounted payoff chains (θ=0)
    /// in the regression targets.
    pub theta: f64,
    /// Ensemble size C; members train on disjoint path blocks.
    pub members: usize,
    /// Paths per member M (total paths C·M).
    pub paths_per_member: usize,
    /// Number of timesteps N.
    pub n_steps: usize,
    /// Recursion stride J.
    pub j_anchor: usize,
    /// Hidden layers per net.
    pub hidden_layers: usize,
    /// Hidden width per net.
    pub width: usize,
    /// Global-norm gradient clip threshold.
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference hyperparameters for a `d`-asset problem: 600 steps of
    /// batch 400, θ = 1/2, three members, stride 4, seven hidden layers of
    /// width d+5, clip 5, standard Adam moments.
    pub fn defaults(d: usize, n_steps: usize, paths_per_member: usize, seed: u64) -> Self {
        TrainConfig {
            steps: 600,
            batch: 400,
            theta: 0.5,
            members: 3,
            paths_per_member,
            n_steps,
            j_anchor: 4,
            hidden_layers: 7,
            width: d + 5,
            clip_norm: 5.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed,
        }
    }

    /// One message per violated rule.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(0.0..=1.0).contains(&self.theta) {
            errs.push(format!("train.theta: must lie in [0,1], got {}", self.theta));
        }
        if self.batch > self.paths_per_member {
            errs.push(format!(
                "train.batch: {} exceeds samples per member {}",
                self.batch, self.paths_per_member
            ));
        }
        if self.batch < 2 {
            errs.push("train.batch: must be at least 2".into());
        }
        if self.steps < 1 {
            errs.push("train.steps: must be at least 1".into());
        }
        if self.members < 1 {
            errs.push("train.members: must be at least 1".into());
        }
        if self.n_steps < 1 {
            errs.push("train.n_steps: must be at least 1".into());
        }
        if self.j_anchor < 1 {
            errs.push("train.j_anchor: must be at least 1".into());
        }
        if self.hidden_layers < 1 || self.width < 1 {
            errs.push("train.net: need at least one hidden layer and width 1".into());
        }
        if !(self.clip_norm > 0.0) {
            errs.push("train.clip_norm: must be > 0".into());
        }
        errs
    }

    /// Recursion stride at timestep `n`: distance to the parent net,
    /// `η = ((N−n−1) mod J) + 1`, which lands on the nearest index above
    /// `n` whose distance to expiry is a multiple of J.
    pub fn eta(&self, n: usize) -> usize {
        (self.n_steps - n - 1) % self.j_anchor + 1
    }
}

/// Learning-rate decay: flat at 0.01 for the first 150 steps, then
/// exponential down to 1e-5 at step 500, flat afterwards.
pub fn lr_schedule(s: usize) -> f64 {
    let e = ((s as f64 - 150.0) / 350.0).clamp(0.0, 1.0);
    0.01 * 0.001f64.powf(e)
}

/// Blend rate for the normalization running statistics: 1 at step 0 (the
/// first minibatch replaces them), decaying to 0 at step 350 and beyond.
pub fn bn_rate_schedule(s: usize) -> f64 {
    let e = (s as f64 / 350.0).clamp(0.0, 1.0);
    (0.01f64.powf(e) - 0.01) / 0.99
}

/// First and second moment accumulators of Adam over a flat parameter
/// vector.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update in place: clip the gradient to `clip_norm` in global
/// norm, advance the moment estimates, and apply the bias-corrected step.
/// Rejects non-finite gradients.
pub fn adam_step(
    params: &mut [f64],
    grads: &mut [f64],
    state: &mut AdamState,
    lr: f64,
    clip_norm: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), ()> {
    let mut norm_sq = 0.0;
    for g in grads.iter() {
        if !g.is_finite() {
            return Err(());
        }
        norm_sq += g * g;
    }
    let norm = norm_sq.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Path-wise training state over the whole spacetime grid: price samples,
/// delta samples, exercise flags and regression targets, each stored as
/// `(N+1)` rows of `n_paths` (times `d` for deltas).
#[derive(Clone, Debug, PartialEq)]
pub struct ValueSurface {
    pub n_steps: usize,
    pub n_paths: usize,
    pub d: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub exercised: Vec<bool>,
    pub v: Vec<f64>,
}

impl ValueSurface {
    fn zeroed(n_steps: usize, n_paths: usize, d: usize) -> Self {
        ValueSurface {
            n_steps,
            n_paths,
            d,
            y: vec![0.0; (n_steps + 1) * n_paths],
            z: vec![0.0; (n_steps + 1) * n_paths * d],
            exercised: vec![false; (n_steps + 1) * n_paths],
            v: vec![0.0; (n_steps + 1) * n_paths],
        }
    }

    pub fn y_at(&self, n: usize) -> &[f64] {
        &self.y[n * self.n_paths..(n + 1) * self.n_paths]
    }

    pub fn z_at(&self, n: usize) -> &[f64] {
        let row = self.n_paths * self.d;
        &self.z[n * row..(n + 1) * row]
    }

    pub fn v_at(&self, n: usize) -> &[f64] {
        &self.v[n * self.n_paths..(n + 1) * self.n_paths]
    }

    pub fn exercised_at(&self, n: usize) -> &[bool] {
        &self.exercised[n * self.n_paths..(n + 1) * self.n_paths]
    }

    /// Price/delta/flag samples as CSV (`n,m,Y,Z1..Zd,exercised`).
    pub fn dump_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "n,m,Y")?;
        for i in 1..=self.d {
            write!(out, ",Z{i}")?;
        }
        writeln!(out, ",exercised")?;
        for n in 0..=self.n_steps {
            for m in 0..self.n_paths {
                write!(out, "{n},{m},{}", self.y[n * self.n_paths + m])?;
                for i in 0..self.d {
                    write!(out, ",{}", self.z[(n * self.n_paths + m) * self.d + i])?;
                }
                writeln!(
                    out,
                    ",{}",
                    u8::from(self.exercised[n * self.n_paths + m])
                )?;
            }
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub member: usize,
    pub timestep: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Writes training-log rows as CSV (`member,n,step,loss,lr`).
pub fn dump_train_log<W: Write>(rows: &[TrainLogRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "member,n,step,loss,lr")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.member, r.timestep, r.step, r.loss, r.lr
        )?;
    }
    Ok(())
}

/// Regression targets for row `n`: exercised paths take the raw exercise
/// value, continued paths blend the net value at `n` with the discounted
/// target from `n+1`; the expiry row is the raw exercise value everywhere.
pub fn make_v_targets(
    surface: &ValueSurface,
    n: usize,
    paths: &PathCube,
    payoff: &PayoffSpec,
    theta: f64,
    r: f64,
    dt: f64,
) -> Vec<f64> {
    let m_total = surface.n_paths;
    let d = surface.d;
    let states = paths.states_at(n);
    let mut out = vec![0.0; m_total];
    if n == surface.n_steps {
        for m in 0..m_total {
            out[m] = payoff.intrinsic(&states[m * d..(m + 1) * d]);
        }
        return out;
    }
    let disc = (-r * dt).exp();
    let y_row = surface.y_at(n);
    let v_next = surface.v_at(n + 1);
    let flags = surface.exercised_at(n);
    for m in 0..m_total {
        out[m] = if flags[m] {
            payoff.intrinsic(&states[m * d..(m + 1) * d])
        } else {
            theta * y_row[m] + (1.0 - theta) * disc * v_next[m]
        };
    }
    out
}

/// Warm start for the net at timestep `n`: inherit every parameter from
/// the most recently trained net of this member — the one at timestep
/// `n + 1`, since the sweep runs backwards — whose optimum is close to
/// this net's because the two timesteps differ by one step of size Δt.
/// Only the first net of the sweep (`n = N-1`, nothing trained yet)
/// draws a fresh initialization.
fn init_net(
    member: &MemberNets,
    member_idx: usize,
    n: usize,
    parent: usize,
    shape: NetShape,
    cfg: &TrainConfig,
) -> TimestepNet {
    match member.nets.get(&(n + 1)) {
        Some(p) => TimestepNet::inherit(p, n, parent),
        None => TimestepNet::fresh(shape, n, parent, cfg.seed, member_idx),
    }
}

/// Assembles the feature batch for timestep `n` of one member block:
/// states, raw payoff and gradient, and the member's own parent value
/// function evaluated at the same states.
#[allow(clippy::too_many_arguments)]
fn build_features(
    member: &MemberNets,
    parent: usize,
    d: usize,
    block_states: &[f64],
    payoff: &PayoffSpec,
    kappa: f64,
    dt: f64,
    cfg: &TrainConfig,
) -> Result<FeatureBatch, NetError> {
    let len = cfg.paths_per_member;
    let (y_parent, grad_y_parent) = member.stack_value_and_delta(
        parent,
        block_states,
        d,
        payoff,
        kappa,
        dt,
        cfg.n_steps,
    )?;
    let mut feats = FeatureBatch {
        d,
        len,
        s: block_states.to_vec(),
        g: vec![0.0; len],
        g_grad: vec![0.0; len * d],
        y_parent,
        grad_y_parent,
    };
    let mut grad = vec![0.0; d];
    for m in 0..len {
        let s = &block_states[m * d..(m + 1) * d];
        feats.g[m] = payoff.g(s);
        payoff.g_grad(s, &mut grad);
        feats.g_grad[m * d..(m + 1) * d].copy_from_slice(&grad);
    }
    Ok(feats)
}

/// Trains the net for timestep `n` on one member's path block and returns
/// it together with its log rows.  `v_next_block` are the regression
/// targets v^{n+1} restricted to the block; `dw_block` the Brownian
/// increments of step `n`.
#[allow(clippy::too_many_arguments)]
fn train_timestep(
    member: &MemberNets,
    member_idx: usize,
    n: usize,
    block_states: &[f64],
    dw_block: &[f64],
    v_next_block: &[f64],
    mp: &MarketParams,
    payoff: &PayoffSpec,
    kappa: f64,
    cfg: &TrainConfig,
) -> Result<(TimestepNet, Vec<TrainLogRow>), TrainError> {
    let wrap = |source: NetError| TrainError::Net {
        member: member_idx,
        timestep: n,
        source,
    };
    let d = mp.d;
    let dt = mp.maturity / cfg.n_steps as f64;
    let parent = n + cfg.eta(n);
    let shape = NetShape {
        input_dim: d + 2,
        width: cfg.width,
        hidden_layers: cfg.hidden_layers,
    };
    let feats =
        build_features(member, parent, d, block_states, payoff, kappa, dt, cfg).map_err(wrap)?;
    let mut net = init_net(member, member_idx, n, parent, shape, cfg);
    net.set_input_whitening(&feats).map_err(wrap)?;

    // Per-sample tangent direction σ_i·S_i·ΔW_i.
    let len = feats.len;
    let mut tangent = vec![0.0; len * d];
    for m in 0..len {
        for i in 0..d {
            tangent[m * d + i] = mp.sigma[i] * block_states[m * d + i] * dw_block[m * d + i];
        }
    }
    let inputs = LossInputs {
        feats: &feats,
        tangent_dir: &tangent,
        v_next: v_next_block,
        growth: 1.0 + mp.r * dt,
        dt,
    };

    // Epoch-free shuffled minibatches: draw consecutive windows from a
    // shuffled index list, reshuffling whenever fewer than a full batch
    // remains, so steps·batch = M covers every sample exactly once.
    let mut order: Vec<usize> = (0..len).collect();
    let mut shuffle_rng = rng::derived_rng(
        cfg.seed,
        [rng::purpose::SHUFFLE, member_idx as u64, n as u64],
    );
    let mut shuffle = |order: &mut Vec<usize>| {
        for i in (1..order.len()).rev() {
            let j = (shuffle_rng.next_u64() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }
    };
    shuffle(&mut order);
    let mut pos = 0usize;

    let flat_len = net.params.flat_len();
    let mut adam = AdamState::new(flat_len);
    let mut pflat = vec![0.0; flat_len];
    let mut gflat = vec![0.0; flat_len];
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if pos + cfg.batch > len {
            shuffle(&mut order);
            pos = 0;
        }
        let batch = &order[pos..pos + cfg.batch];
        pos += cfg.batch;

        let stats = batch_stats(&net, &feats, batch).map_err(wrap)?;
        net.update_running_stats(&stats, bn_rate_schedule(step));
        let (loss, grads) =
            loss_and_param_grads(&net, &inputs, batch, &stats).map_err(wrap)?;
        let lr = lr_schedule(step);
        net.params.write_flat(&mut pflat);
        grads.write_flat(&mut gflat);
        adam_step(
            &mut pflat,
            &mut gflat,
            &mut adam,
            lr,
            cfg.clip_norm,
            cfg.adam_beta1,
            cfg.adam_beta2,
            cfg.adam_eps,
        )
        .map_err(|_| TrainError::NonFiniteGradient {
            member: member_idx,
            timestep: n,
            step,
        })?;
        net.params.read_flat(&pflat);
        log.push(TrainLogRow {
            member: member_idx,
            timestep: n,
            step,
            loss,
            lr,
        });
    }
    Ok((net, log))
}

/// Runs the whole backward recursion and returns the trained ensemble, the
/// spacetime surface and the per-step training log.
pub fn backward_sweep(
    mp: &MarketParams,
    payoff: &PayoffSpec,
    cfg: &TrainConfig,
) -> Result<(EnsembleModel, ValueSurface, Vec<TrainLogRow>), TrainError> {
    let cfg_errs = cfg.validation_errors();
    if !cfg_errs.is_empty() {
        return Err(TrainError::InvalidConfig(cfg_errs));
    }
    let d = mp.d;
    let n_steps = cfg.n_steps;
    let m_total = cfg.members * cfg.paths_per_member;
    let dt = mp.maturity / n_steps as f64;
    let kappa = 2.0 / dt;

    let paths = simulate::generate_paths(mp, n_steps, m_total, cfg.seed)?;
    let mut surface = ValueSurface::zeroed(n_steps, m_total, d);

    // Seed every row with the smoothed expiry payoff and its gradient.
    {
        let mut grad = vec![0.0; d];
        for nu in 0..=n_steps {
            let states = paths.states_at(nu);
            for m in 0..m_total {
                let s = &states[m * d..(m + 1) * d];
                let val = payoff.smoothed(s, kappa, &mut grad);
                surface.y[nu * m_total + m] = val;
                surface.z[(nu * m_total + m) * d..(nu * m_total + m + 1) * d]
                    .copy_from_slice(&grad);
                surface.exercised[nu * m_total + m] = val <= payoff.intrinsic(s);
            }
        }
    }
    // Terminal regression targets are the raw exercise value.
    let v_terminal = make_v_targets(&surface, n_steps, &paths, payoff, cfg.theta, mp.r, dt);
    surface.v[n_steps * m_total..].copy_from_slice(&v_terminal);

    let mut members: Vec<MemberNets> = vec![MemberNets::default(); cfg.members];
    let mut log = Vec::new();

    for n in (0..n_steps).rev() {
        let states_n = paths.states_at(n);
        let dw_n = paths.dw_at(n);
        let v_next = surface.v_at(n + 1).to_vec();

        // Members train in parallel on disjoint blocks; the barrier is the
        // collection of results below.
        let block_len = cfg.paths_per_member;
        let trained: Vec<Result<(TimestepNet, Vec<TrainLogRow>), TrainError>> =
            parallel::map_indexed(cfg.members, |c| {
                let rows = c * block_len * d..(c + 1) * block_len * d;
                train_timestep(
                    &members[c],
                    c,
                    n,
                    &states_n[rows.clone()],
                    &dw_n[rows],
                    &v_next[c * block_len..(c + 1) * block_len],
                    mp,
                    payoff,
                    kappa,
                    cfg,
                )
            });
        for (c, result) in trained.into_iter().enumerate() {
            let (net, rows) = result?;
            members[c].nets.insert(n, net);
            log.extend(rows);
        }

        // Ensemble evaluation: overwrite price/delta samples with the
        // averaged y^n — at every earlier row when n is an anchor
        // ((N−n) mod J = 0), otherwise at row n only.
        let rows_to_write: Vec<usize> = if (n_steps - n) % cfg.j_anchor == 0 {
            (0..=n).collect()
        } else {
            vec![n]
        };
        for &nu in &rows_to_write {
            let states_nu = paths.states_at(nu);
            let mut y_acc = vec![0.0; m_total];
            let mut z_acc = vec![0.0; m_total * d];
            for (c, member) in members.iter().enumerate() {
                let (y, z) = member
                    .stack_value_and_delta(n, states_nu, d, payoff, kappa, dt, n_steps)
                    .map_err(|source| TrainError::Net {
                        member: c,
                        timestep: n,
                        source,
                    })?;
                for (acc, v) in y_acc.iter_mut().zip(&y) {
                    *acc += v;
                }
                for (acc, v) in z_acc.iter_mut().zip(&z) {
                    *acc += v;
                }
            }
            let inv_c = 1.0 / cfg.members as f64;
            for (dst, v) in surface.y[nu * m_total..(nu + 1) * m_total]
                .iter_mut()
                .zip(&y_acc)
            {
                *dst = v * inv_c;
            }
            for (dst, v) in surface.z[nu * m_total * d..(nu + 1) * m_total * d]
                .iter_mut()
                .zip(&z_acc)
            {
                *dst = v * inv_c;
            }
        }

        // Exercise classification at row n, then the regression targets.
        for m in 0..m_total {
            let f = payoff.intrinsic(&states_n[m * d..(m + 1) * d]);
            surface.exercised[n * m_total + m] = surface.y[n * m_total + m] <= f;
        }
        let v_row = make_v_targets(&surface, n, &paths, payoff, cfg.theta, mp.r, dt);
        surface.v[n * m_total..(n + 1) * m_total].copy_from_slice(&v_row);
    }

    // Final clamp: prices can never sit below the exercise value.
    for n in 0..=n_steps {
        let states = paths.states_at(n);
        for m in 0..m_total {
            let f = payoff.intrinsic(&states[m * d..(m + 1) * d]);
            let y = &mut surface.y[n * m_total + m];
            if *y < f {
                *y = f;
            }
        }
    }

    let model = EnsembleModel {
        market: mp.clone(),
        payoff: *payoff,
        kappa,
        n_steps,
        j_anchor: cfg.j_anchor,
        seed: cfg.seed,
        members,
    };
    Ok((model, surface, log))
}
