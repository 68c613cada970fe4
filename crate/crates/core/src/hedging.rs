//! Time-zero price/delta estimators from stopping rules, and a discrete
//! delta-hedging simulator that produces relative profit-and-loss
//! distributions for any provider of prices, deltas and exercise decisions.

use crate::fdoracle::FdGrid;
use crate::market::{MarketParams, PayoffSpec};
use crate::netcore::{EnsembleModel, NetError};
use crate::parallel;
use crate::simulate::PathCube;
use crate::training::ValueSurface;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HedgeError {
    #[error("hedge intervals ({intervals}) must divide the path timesteps ({n_steps})")]
    IntervalsDontDivide { intervals: usize, n_steps: usize },
    #[error("provider query failed at timestep {timestep} (t = {time}): {source}")]
    Provider {
        timestep: usize,
        time: f64,
        #[source]
        source: ProviderError,
    },
    #[error("invalid hedge request: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("state outside the tabulated range: {0}")]
    OutOfRange(String),
}

/// Applies the trained stack's exercise rule (stop once the continuation
/// value drops to the intrinsic payoff) along fresh paths, returning the
/// stopping timestep per path; paths that never exercise stop at expiry.
/// Only paths still alive at a timestep are evaluated there.
pub fn model_stopping_indices(
    model: &EnsembleModel,
    paths: &PathCube,
) -> Result<Vec<usize>, NetError> {
    let d = model.market.d;
    let n_steps = paths.n_steps;
    let mut tau = vec![n_steps; paths.n_paths];
    let mut alive: Vec<usize> = (0..paths.n_paths).collect();
    let mut buf: Vec<f64> = Vec::new();
    for n in 0..n_steps {
        if alive.is_empty() {
            break;
        }
        buf.clear();
        for &m in &alive {
            buf.extend_from_slice(paths.state(n, m));
        }
        let (y, _) = model.value_and_delta(n, &buf)?;
        let mut still = Vec::with_capacity(alive.len());
        for (k, &m) in alive.iter().enumerate() {
            let f = model.payoff.intrinsic(&buf[k * d..(k + 1) * d]);
            if y[k] <= f {
                tau[m] = n;
            } else {
                still.push(m);
            }
        }
        alive = still;
    }
    Ok(tau)
}

/// First timestep at which each path's exercise flag fires, as
/// `(calendar time, timestep index)`; paths that never exercise stop at
/// expiry.
pub fn stopping_times(surface: &ValueSurface, dt: f64) -> Vec<(f64, usize)> {
    let m_total = surface.n_paths;
    parallel::map_indexed(m_total, |m| {
        let n = (0..=surface.n_steps)
            .find(|&k| surface.exercised[k * m_total + m])
            .unwrap_or(surface.n_steps);
        (n as f64 * dt, n)
    })
}

/// Discounted exercise payoff per path, e^{−r·τ_m}·f(S(τ_m)).
pub fn discounted_payoffs(
    paths: &PathCube,
    tau_idx: &[usize],
    r: f64,
    payoff: &PayoffSpec,
) -> Vec<f64> {
    let dt = paths.dt;
    parallel::map_indexed(tau_idx.len(), |m| {
        let n = tau_idx[m];
        (-r * dt * n as f64).exp() * payoff.intrinsic(paths.state(n, m))
    })
}

/// Sample mean and its standard error.
pub fn mean_and_se(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo price at t=0 from per-path stopping times: the mean
/// discounted exercise payoff, with its standard error.
pub fn initial_price(
    paths: &PathCube,
    tau_idx: &[usize],
    r: f64,
    payoff: &PayoffSpec,
) -> (f64, f64) {
    mean_and_se(&discounted_payoffs(paths, tau_idx, r, payoff))
}

/// Pathwise time-zero delta from stopping times:
/// Δ_i = mean over paths of e^{−rτ}·(∂f/∂s_i)(S(τ))·S_i(τ)/s⁰_i,
/// with per-component standard errors.
pub fn initial_delta(
    paths: &PathCube,
    tau_idx: &[usize],
    mp: &MarketParams,
    payoff: &PayoffSpec,
) -> (Vec<f64>, Vec<f64>) {
    let d = mp.d;
    let m_total = tau_idx.len();
    let dt = paths.dt;
    let mut mean = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for (m, &tau) in tau_idx.iter().enumerate() {
        let s_tau = paths.state(tau, m);
        let w = (-mp.r * dt * tau as f64).exp();
        payoff.intrinsic_grad(s_tau, &mut grad);
        for i in 0..d {
            let sample = w * grad[i] * s_tau[i] / mp.s0[i];
            mean[i] += sample;
            sumsq[i] += sample * sample;
        }
    }
    let inv_m = 1.0 / m_total as f64;
    let mut se = vec![0.0; d];
    for i in 0..d {
        mean[i] *= inv_m;
        if m_total > 1 {
            let var = (sumsq[i] * inv_m - mean[i] * mean[i]).max(0.0) * m_total as f64
                / (m_total as f64 - 1.0);
            se[i] = (var * inv_m).sqrt();
        }
    }
    (mean, se)
}

/// One batch of provider answers: value, spatial gradient (row-major
/// `len × d`), and the exercise decision per queried state.
pub struct ProviderQuote {
    pub value: Vec<f64>,
    pub delta: Vec<f64>,
    pub exercise: Vec<bool>,
}

/// Anything that can price, differentiate and classify states along the
/// hedge: the trained network stack, or a finite-difference table.
pub trait HedgeProvider {
    /// Quotes a batch of states at path timestep `n` (calendar time `t`).
    fn quote(&self, n: usize, t: f64, states: &[f64], d: usize)
        -> Result<ProviderQuote, ProviderError>;
}

/// Hedge provider backed by the trained ensemble: value is the clamped
/// continuation estimate max(y, f), delta follows whichever branch is
/// active, and the exercise decision is the training rule y ≤ f.
pub struct ModelProvider<'a> {
    pub model: &'a EnsembleModel,
}

impl HedgeProvider for ModelProvider<'_> {
    fn quote(
        &self,
        n: usize,
        _t: f64,
        states: &[f64],
        d: usize,
    ) -> Result<ProviderQuote, ProviderError> {
        let (y, dy) = self.model.value_and_delta(n, states)?;
        let len = y.len();
        let payoff = self.model.payoff;
        let mut value = vec![0.0; len];
        let mut delta = vec![0.0; len * d];
        let mut exercise = vec![false; len];
        let mut grad = vec![0.0; d];
        for m in 0..len {
            let s = &states[m * d..(m + 1) * d];
            let f = payoff.intrinsic(s);
            if y[m] <= f {
                exercise[m] = true;
                value[m] = f;
                payoff.intrinsic_grad(s, &mut grad);
                delta[m * d..(m + 1) * d].copy_from_slice(&grad);
            } else {
                value[m] = y[m];
                delta[m * d..(m + 1) * d].copy_from_slice(&dy[m * d..(m + 1) * d]);
            }
        }
        Ok(ProviderQuote {
            value,
            delta,
            exercise,
        })
    }
}

/// Hedge provider backed by a 1-D finite-difference solution of the
/// geometric-average reduction: each d-dimensional state is collapsed to
/// its geometric mean, and the tabulated derivative is spread across
/// assets by the chain rule ∂ŝ/∂s_i = ŝ/(d·s_i).  With d = 1 this is the
/// plain finite-difference table.
pub struct ReducedFdProvider<'a> {
    pub grid: &'a FdGrid,
}

impl HedgeProvider for ReducedFdProvider<'_> {
    fn quote(
        &self,
        _n: usize,
        t: f64,
        states: &[f64],
        d: usize,
    ) -> Result<ProviderQuote, ProviderError> {
        let len = states.len() / d.max(1);
        let rows: Vec<Result<(f64, Vec<f64>, bool), ProviderError>> =
            parallel::map_indexed(len, |m| {
                let s = &states[m * d..(m + 1) * d];
                let shat = crate::market::geometric_mean(s);
                let (v, dv, clamped) = self.grid.interp_price_delta(shat, t);
                if clamped {
                    return Err(ProviderError::OutOfRange(format!(
                        "reduced state {shat} at t = {t} left the grid"
                    )));
                }
                let mut delta = vec![0.0; d];
                for i in 0..d {
                    delta[i] = dv * shat / (d as f64 * s[i].max(1e-12));
                }
                Ok((v, delta, self.grid.exercised_at(shat, t)))
            });
        let mut value = Vec::with_capacity(len);
        let mut delta = Vec::with_capacity(len * d);
        let mut exercise = Vec::with_capacity(len);
        for row in rows {
            let (v, dl, ex) = row?;
            value.push(v);
            delta.extend_from_slice(&dl);
            exercise.push(ex);
        }
        Ok(ProviderQuote {
            value,
            delta,
            exercise,
        })
    }
}

/// Outcome of a delta-hedging simulation.
#[derive(Clone, Debug, Serialize)]
pub struct HedgeReport {
    pub intervals: usize,
    /// e^{−rT}·Π_T / v(s⁰, 0) per path.
    pub relative_pnl: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// `bins + 1` histogram bin edges spanning the sample range.
    pub hist_edges: Vec<f64>,
    /// Paths per bin; sums to the path count.
    pub hist_counts: Vec<usize>,
}

impl HedgeReport {
    /// Histogram rows as CSV: `bin_left,bin_right,count`.
    pub fn write_histogram_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "bin_left,bin_right,count")?;
        for (k, &count) in self.hist_counts.iter().enumerate() {
            writeln!(w, "{},{},{count}", self.hist_edges[k], self.hist_edges[k + 1])?;
        }
        Ok(())
    }
}

fn build_histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0usize; bins];
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    (edges, counts)
}

/// Number of histogram bins in a hedge report.
pub const HISTOGRAM_BINS: usize = 50;

/// Simulates a discrete delta hedge of one short option along every path.
///
/// The ledger: sell the option at the provider's t=0 value, hold the
/// provider's delta in shares, and keep the rest in a bank account that
/// accrues at `r` over each interval.  Held shares credit their continuous
/// dividend yield `δ_i·S_i·Δt·Δ_i` to the bank (start-of-interval prices,
/// matching when the holding was set).  When the provider's boundary says
/// exercise — checked at rebalance dates — the short pays the exercise
/// value, the shares are liquidated, and the bank accrues to expiry.
/// Unexercised paths settle the exercise value at expiry.
pub fn hedge_simulate(
    provider: &dyn HedgeProvider,
    paths: &PathCube,
    mp: &MarketParams,
    payoff: &PayoffSpec,
    intervals: usize,
) -> Result<HedgeReport, HedgeError> {
    let n_steps = paths.n_steps;
    if intervals == 0 || n_steps % intervals != 0 {
        return Err(HedgeError::IntervalsDontDivide { intervals, n_steps });
    }
    let d = mp.d;
    if paths.d != d {
        return Err(HedgeError::Invalid(format!(
            "paths have {} assets but the market has {d}",
            paths.d
        )));
    }
    let m_total = paths.n_paths;
    let stride = n_steps / intervals;
    let dt_int = mp.maturity / intervals as f64;
    let growth = (mp.r * dt_int).exp();

    let quote_at = |n: usize, t: f64, states: &[f64]| {
        provider
            .quote(n, t, states, d)
            .map_err(|source| HedgeError::Provider {
                timestep: n,
                time: t,
                source,
            })
    };

    // t = 0: every path starts at the same state, so one quote serves all.
    let q0 = quote_at(0, 0.0, paths.state(0, 0))?;
    let v0 = q0.value[0];
    if !(v0 > 0.0) {
        return Err(HedgeError::Invalid(format!(
            "initial option value {v0} cannot normalize a relative P&L"
        )));
    }

    let mut bank = vec![0.0; m_total];
    let mut hold = vec![0.0; m_total * d];
    let mut active = vec![true; m_total];
    let s0 = paths.state(0, 0);
    if q0.exercise[0] {
        // Exercised against us immediately: pay out, never build the hedge.
        for m in 0..m_total {
            bank[m] = v0 - payoff.intrinsic(s0);
            active[m] = false;
        }
    } else {
        let spend: f64 = (0..d).map(|i| q0.delta[i] * s0[i]).sum();
        for m in 0..m_total {
            bank[m] = v0 - spend;
            hold[m * d..(m + 1) * d].copy_from_slice(&q0.delta[..d]);
        }
    }

    let mut alive_states: Vec<f64> = Vec::new();
    let mut alive_idx: Vec<usize> = Vec::new();
    for k in 1..=intervals {
        let n = k * stride;
        let n_prev = (k - 1) * stride;
        let t = n as f64 * paths.dt;
        let states = paths.states_at(n);
        let prev_states = paths.states_at(n_prev);

        // Interest on the whole bank, dividends on held shares.
        for m in 0..m_total {
            bank[m] *= growth;
        }
        for (m, bank_m) in bank.iter_mut().enumerate() {
            if !active[m] {
                continue;
            }
            let mut dividends = 0.0;
            for i in 0..d {
                dividends += mp.delta[i] * prev_states[m * d + i] * hold[m * d + i];
            }
            *bank_m += dividends * dt_int;
        }

        if k == intervals {
            // Expiry: settle everything still open.
            for m in 0..m_total {
                if !active[m] {
                    continue;
                }
                let s = &states[m * d..(m + 1) * d];
                let position: f64 = (0..d).map(|i| hold[m * d + i] * s[i]).sum();
                bank[m] += position - payoff.intrinsic(s);
                hold[m * d..(m + 1) * d].fill(0.0);
                active[m] = false;
            }
            break;
        }

        alive_idx.clear();
        alive_states.clear();
        for m in 0..m_total {
            if active[m] {
                alive_idx.push(m);
                alive_states.extend_from_slice(&states[m * d..(m + 1) * d]);
            }
        }
        if alive_idx.is_empty() {
            continue;
        }
        let q = quote_at(n, t, &alive_states)?;
        for (row, &m) in alive_idx.iter().enumerate() {
            let s = &states[m * d..(m + 1) * d];
            if q.exercise[row] {
                let position: f64 = (0..d).map(|i| hold[m * d + i] * s[i]).sum();
                bank[m] += position - payoff.intrinsic(s);
                hold[m * d..(m + 1) * d].fill(0.0);
                active[m] = false;
            } else {
                let target = &q.delta[row * d..(row + 1) * d];
                let mut trade_cost = 0.0;
                for i in 0..d {
                    trade_cost += (target[i] - hold[m * d + i]) * s[i];
                }
                bank[m] -= trade_cost;
                hold[m * d..(m + 1) * d].copy_from_slice(target);
            }
        }
    }

    let disc_t = (-mp.r * mp.maturity).exp();
    let relative_pnl: Vec<f64> = bank.iter().map(|&b| disc_t * b / v0).collect();
    let (mean, _) = mean_and_se(&relative_pnl);
    let std = if m_total > 1 {
        (relative_pnl
            .iter()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / (m_total as f64 - 1.0))
            .sqrt()
    } else {
        0.0
    };
    let (hist_edges, hist_counts) = build_histogram(&relative_pnl, HISTOGRAM_BINS);
    Ok(HedgeReport {
        intervals,
        relative_pnl,
        mean,
        std,
        hist_edges,
        hist_counts,
    })
}
