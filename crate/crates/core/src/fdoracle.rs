//! Exact-solution oracle: 1-D Crank–Nicolson solver for American (and
//! European) calls, the geometric-average reduction that maps a symmetric
//! d-asset geometric option to an equivalent 1-D problem, and the
//! Black–Scholes closed form used to validate the solver.
//!
//! The reduction: if every asset shares volatility σ, dividend yield δ and
//! pairwise correlation ρ, then the geometric average s′ = (∏ sᵢ)^{1/d} is
//! itself lognormal with effective volatility σ′ = σ·√((1+(d−1)ρ)/d) and
//! carry drift μ′ = r − δ + (σ′² − σ²)/2, so the d-dimensional geometric
//! option price equals the 1-D price u(s′, t) and deltas follow by the chain
//! rule ∂v/∂sᵢ = u′(s′)·s′/(d·sᵢ).

use crate::market::MarketParams;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FdError {
    #[error("geometric reduction not applicable: {0}")]
    ReductionNotApplicable(String),
    #[error("invalid grid request: {0}")]
    InvalidGrid(String),
    #[error(
        "penalty iteration did not converge within {max_iters} iterations at backward step {step} (t = {t:.6})"
    )]
    PenaltyDiverged {
        step: usize,
        t: f64,
        max_iters: usize,
    },
}

/// Effective 1-D dynamics of the geometric average of a symmetric basket.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reduced1D {
    /// Effective volatility σ′.
    pub sigma: f64,
    /// Carry drift μ′ of the reduced asset (its risk-neutral growth rate).
    pub drift: f64,
    /// Discount rate (unchanged by the reduction).
    pub r: f64,
    /// Initial value of the reduced asset, (∏ s⁰ᵢ)^{1/d}.
    pub s0: f64,
}

/// Collapses a symmetric d-asset market into the 1-D dynamics of its
/// geometric average.  Requires equal volatilities, equal dividend yields
/// and a single pairwise correlation; rejects anything else.
pub fn reduce_geometric(mp: &MarketParams) -> Result<Reduced1D, FdError> {
    let d = mp.d;
    let sigma = mp.sigma[0];
    if mp.sigma.iter().any(|&s| (s - sigma).abs() > 1e-12) {
        return Err(FdError::ReductionNotApplicable(
            "volatilities are not all equal".into(),
        ));
    }
    let delta = mp.delta[0];
    if mp.delta.iter().any(|&x| (x - delta).abs() > 1e-12) {
        return Err(FdError::ReductionNotApplicable(
            "dividend yields are not all equal".into(),
        ));
    }
    let rho = if d > 1 { mp.rho[1] } else { 1.0 };
    for i in 0..d {
        for j in 0..d {
            let expect = if i == j { 1.0 } else { rho };
            if (mp.rho[i * d + j] - expect).abs() > 1e-12 {
                return Err(FdError::ReductionNotApplicable(format!(
                    "correlation matrix is not equicorrelated (entry ({i},{j}))"
                )));
            }
        }
    }
    let df = d as f64;
    let sigma_eff = sigma * ((1.0 + (df - 1.0) * rho) / df).sqrt();
    let drift = mp.r - delta + 0.5 * (sigma_eff * sigma_eff - sigma * sigma);
    let s0 = geometric_mean(&mp.s0);
    Ok(Reduced1D {
        sigma: sigma_eff,
        drift,
        r: mp.r,
        s0,
    })
}

fn geometric_mean(s: &[f64]) -> f64 {
    match s {
        [only] => *only,
        _ => (s.iter().map(|x| x.ln()).sum::<f64>() / s.len() as f64).exp(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExerciseStyle {
    American,
    /// Penalty disabled — used to validate the scheme against the
    /// Black–Scholes closed form.
    European,
}

/// Finite-difference solution on a uniform space grid over [0, 8K] and a
/// uniform time grid over [0, T], stored in forward calendar order:
/// `v[k·nodes + j]` is the value at time `t_nodes[k]`, price `s_nodes[j]`.
#[derive(Clone, Debug)]
pub struct FdGrid {
    pub s_nodes: Vec<f64>,
    pub t_nodes: Vec<f64>,
    /// Option values, `(steps+1) × nodes`.
    pub v: Vec<f64>,
    /// Space derivative of the value, same layout.
    pub dv: Vec<f64>,
    /// Exercise value at each node (time-independent).
    pub payoff_nodes: Vec<f64>,
    pub sigma: f64,
    pub drift: f64,
    pub r: f64,
    pub strike: f64,
    pub maturity: f64,
    pub style: ExerciseStyle,
}

const PENALTY: f64 = 1e6;
const PENALTY_TOL: f64 = 1e-8;
const PENALTY_MAX_ITERS: usize = 100;
/// Classification slack when deciding whether a state sits on the exercise
/// boundary: the penalty method holds V within ~1/penalty of the payoff.
const EXERCISE_TOL: f64 = 1e-6;

impl FdGrid {
    pub fn nodes(&self) -> usize {
        self.s_nodes.len()
    }

    /// Values at time slice `k` (calendar index).
    pub fn slice(&self, k: usize) -> &[f64] {
        let n = self.nodes();
        &self.v[k * n..(k + 1) * n]
    }

    /// Exercise value at an arbitrary price by linear interpolation of the
    /// node payoffs (exact for piecewise-linear payoffs with on-node kinks).
    pub fn payoff_at(&self, s: f64) -> f64 {
        let (j, w, _) = self.locate_s(s);
        (1.0 - w) * self.payoff_nodes[j] + w * self.payoff_nodes[j + 1]
    }

    /// Whether (s, t) lies in the exercise region: positive exercise value
    /// that the solution has been pushed down onto.
    pub fn exercised_at(&self, s: f64, t: f64) -> bool {
        let f = self.payoff_at(s);
        if f <= 0.0 {
            return false;
        }
        let (v, _, _) = self.interp_price_delta(s, t);
        v - f <= EXERCISE_TOL * (1.0 + f.abs())
    }

    fn locate_s(&self, s: f64) -> (usize, f64, bool) {
        let n = self.nodes();
        let h = self.s_nodes[1] - self.s_nodes[0];
        let clamped = !(self.s_nodes[0]..=self.s_nodes[n - 1]).contains(&s);
        let x = (s - self.s_nodes[0]) / h;
        let j = (x.floor() as isize).clamp(0, n as isize - 2) as usize;
        let w = (x - j as f64).clamp(0.0, 1.0);
        (j, w, clamped)
    }

    /// Bilinear interpolation of (price, delta) at (s, t).  Queries outside
    /// the grid span are clamped to the boundary; the third element reports
    /// whether clamping occurred.
    pub fn interp_price_delta(&self, s: f64, t: f64) -> (f64, f64, bool) {
        let (j, ws, clamped_s) = self.locate_s(s);
        let steps = self.t_nodes.len() - 1;
        let dt = self.maturity / steps as f64;
        let x = t / dt;
        let clamped_t = !(0.0..=self.maturity).contains(&t);
        let k = (x.floor() as isize).clamp(0, steps as isize - 1) as usize;
        let wt = (x - k as f64).clamp(0.0, 1.0);
        let n = self.nodes();
        let pick = |grid: &[f64]| {
            let v00 = grid[k * n + j];
            let v01 = grid[k * n + j + 1];
            let v10 = grid[(k + 1) * n + j];
            let v11 = grid[(k + 1) * n + j + 1];
            (1.0 - wt) * ((1.0 - ws) * v00 + ws * v01) + wt * ((1.0 - ws) * v10 + ws * v11)
        };
        (pick(&self.v), pick(&self.dv), clamped_s || clamped_t)
    }
}

/// Crank–Nicolson solve of the 1-D pricing problem with carry drift
/// `drift`, discounting at `r`, on a uniform grid of `nodes` points over
/// [0, 8·strike] and `steps` timesteps.  The first two backward steps use
/// implicit Euler (Rannacher startup); the American constraint is enforced
/// by a penalty iteration.  Deltas are centered differences in space
/// (one-sided second-order at the boundary nodes).
pub fn solve_american_1d(
    sigma: f64,
    drift: f64,
    r: f64,
    strike: f64,
    maturity: f64,
    payoff: impl Fn(f64) -> f64,
    nodes: usize,
    steps: usize,
    style: ExerciseStyle,
) -> Result<FdGrid, FdError> {
    if nodes < 3 || steps < 1 {
        return Err(FdError::InvalidGrid(format!(
            "need nodes >= 3 and steps >= 1, got ({nodes}, {steps})"
        )));
    }
    if !(strike > 0.0) || !(maturity > 0.0) || !(sigma > 0.0) {
        return Err(FdError::InvalidGrid(
            "need strike > 0, maturity > 0, sigma > 0".into(),
        ));
    }
    let s_max = 8.0 * strike;
    let h = s_max / (nodes - 1) as f64;
    let s_nodes: Vec<f64> = (0..nodes).map(|j| j as f64 * h).collect();
    let dt = maturity / steps as f64;
    let t_nodes: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
    let payoff_nodes: Vec<f64> = s_nodes.iter().map(|&s| payoff(s).max(0.0)).collect();

    // Spatial operator  A V = ½σ²s²V'' + μ′sV' − rV  as tridiagonal rows.
    let mut lo = vec![0.0; nodes];
    let mut mid = vec![0.0; nodes];
    let mut hi = vec![0.0; nodes];
    for j in 1..nodes - 1 {
        let x = s_nodes[j];
        let diff = 0.5 * sigma * sigma * x * x / (h * h);
        let conv = drift * x / (2.0 * h);
        lo[j] = diff - conv;
        mid[j] = -2.0 * diff - r;
        hi[j] = diff + conv;
    }

    let mut v = vec![0.0; (steps + 1) * nodes];
    v[steps * nodes..].copy_from_slice(&payoff_nodes);

    // Dirichlet boundary data.  Lower boundary: exercise value at s = 0
    // (zero for calls).  Upper boundary: the deep-in-the-money asymptote —
    // immediate exercise dominates for the American call; the European case
    // uses the discounted-forward form.
    let bc_low = |_tau: f64| payoff_nodes[0];
    let euro_high =
        |tau: f64| ((drift - r) * tau).exp() * s_max - (-r * tau).exp() * strike;
    let bc_high = |tau: f64| match style {
        ExerciseStyle::American => payoff_nodes[nodes - 1].max(euro_high(tau)),
        ExerciseStyle::European => euro_high(tau),
    };

    let mut sub = vec![0.0; nodes];
    let mut diag = vec![0.0; nodes];
    let mut sup = vec![0.0; nodes];
    let mut rhs = vec![0.0; nodes];
    let mut scratch = vec![0.0; nodes];
    let mut cur = payoff_nodes.clone();

    for back in 0..steps {
        let k = steps - 1 - back; // calendar index being computed
        let tau = maturity - t_nodes[k]; // time to expiry of this slice
        let theta = if back < 2 { 1.0 } else { 0.5 };

        // rhs = V^{k+1} + (1−θ)Δt·A V^{k+1} on interior nodes.
        for j in 1..nodes - 1 {
            let av = lo[j] * cur[j - 1] + mid[j] * cur[j] + hi[j] * cur[j + 1];
            rhs[j] = cur[j] + (1.0 - theta) * dt * av;
        }
        rhs[0] = bc_low(tau);
        rhs[nodes - 1] = bc_high(tau);

        let build_matrix = |sub: &mut [f64], diag: &mut [f64], sup: &mut [f64]| {
            for j in 1..nodes - 1 {
                sub[j] = -theta * dt * lo[j];
                diag[j] = 1.0 - theta * dt * mid[j];
                sup[j] = -theta * dt * hi[j];
            }
            sub[0] = 0.0;
            diag[0] = 1.0;
            sup[0] = 0.0;
            sub[nodes - 1] = 0.0;
            diag[nodes - 1] = 1.0;
            sup[nodes - 1] = 0.0;
        };

        match style {
            ExerciseStyle::European => {
                build_matrix(&mut sub, &mut diag, &mut sup);
                thomas_solve(&sub, &diag, &sup, &rhs, &mut cur, &mut scratch);
            }
            ExerciseStyle::American => {
                // Penalty iteration: add ρ to row j while the iterate sits
                // below the payoff there, pulling the solution up onto it.
                let mut iterate = cur.clone();
                let mut converged = false;
                for _ in 0..PENALTY_MAX_ITERS {
                    build_matrix(&mut sub, &mut diag, &mut sup);
                    let mut rhs_pen = rhs.clone();
                    let mut active_prev = Vec::with_capacity(nodes);
                    for j in 1..nodes - 1 {
                        let active = iterate[j] < payoff_nodes[j];
                        active_prev.push(active);
                        if active {
                            diag[j] += PENALTY;
                            rhs_pen[j] += PENALTY * payoff_nodes[j];
                        }
                    }
                    let mut next = vec![0.0; nodes];
                    thomas_solve(&sub, &diag, &sup, &rhs_pen, &mut next, &mut scratch);
                    let mut max_change = 0.0f64;
                    let mut same_active = true;
                    for j in 1..nodes - 1 {
                        let rel = (next[j] - iterate[j]).abs() / next[j].abs().max(1.0);
                        max_change = max_change.max(rel);
                        if (next[j] < payoff_nodes[j]) != active_prev[j - 1] {
                            same_active = false;
                        }
                    }
                    iterate = next;
                    if same_active || max_change <= PENALTY_TOL {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(FdError::PenaltyDiverged {
                        step: k,
                        t: t_nodes[k],
                        max_iters: PENALTY_MAX_ITERS,
                    });
                }
                cur = iterate;
            }
        }
        v[k * nodes..(k + 1) * nodes].copy_from_slice(&cur);
    }

    // Space derivative per slice: centered interior, one-sided second-order
    // at the edges.
    let mut dv = vec![0.0; (steps + 1) * nodes];
    for k in 0..=steps {
        let row = &v[k * nodes..(k + 1) * nodes];
        let out = &mut dv[k * nodes..(k + 1) * nodes];
        out[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * h);
        for j in 1..nodes - 1 {
            out[j] = (row[j + 1] - row[j - 1]) / (2.0 * h);
        }
        out[nodes - 1] =
            (3.0 * row[nodes - 1] - 4.0 * row[nodes - 2] + row[nodes - 3]) / (2.0 * h);
    }

    Ok(FdGrid {
        s_nodes,
        t_nodes,
        v,
        dv,
        payoff_nodes,
        sigma,
        drift,
        r,
        strike,
        maturity,
        style,
    })
}

/// Tridiagonal solve (Thomas algorithm).  `sub[0]` and `sup[n-1]` are
/// ignored; `scratch` must have length n.
fn thomas_solve(
    sub: &[f64],
    diag: &[f64],
    sup: &[f64],
    rhs: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) {
    let n = diag.len();
    scratch[0] = sup[0] / diag[0];
    out[0] = rhs[0] / diag[0];
    for j in 1..n {
        let denom = diag[j] - sub[j] * scratch[j - 1];
        scratch[j] = sup[j] / denom;
        out[j] = (rhs[j] - sub[j] * out[j - 1]) / denom;
    }
    for j in (0..n - 1).rev() {
        out[j] -= scratch[j] * out[j + 1];
    }
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Black–Scholes call price and delta for an asset with carry drift `drift`
/// (risk-neutral growth rate) and discounting at `r`.
pub fn bs_european(
    sigma: f64,
    drift: f64,
    r: f64,
    strike: f64,
    maturity: f64,
    s: f64,
) -> (f64, f64) {
    let growth = ((drift - r) * maturity).exp();
    let disc = (-r * maturity).exp();
    let vol = sigma * maturity.sqrt();
    if vol < 1e-12 {
        let forward = s * (drift * maturity).exp();
        let price = disc * (forward - strike).max(0.0);
        let delta = if forward > strike { growth } else { 0.0 };
        return (price, delta);
    }
    let d1 = ((s / strike).ln() + (drift + 0.5 * sigma * sigma) * maturity) / vol;
    let d2 = d1 - vol;
    let price = growth * s * norm_cdf(d1) - disc * strike * norm_cdf(d2);
    (price, growth * norm_cdf(d1))
}
