//! Contract and market data: correlated-lognormal market coefficients, the
//! two basket payoffs (geometric-average call and best-of call), their
//! gradients, and the softplus-smoothed expiry payoff that seeds the value
//! recursion.

use serde::{Deserialize, Serialize};

/// Floor applied to prices before taking logarithms: Euler-discretized paths
/// can in principle cross zero, and the geometric average must stay defined.
const PRICE_FLOOR: f64 = 1e-12;

/// Market coefficients for a basket of `d` correlated lognormal assets and
/// the common contract terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketParams {
    /// Number of assets.
    pub d: usize,
    /// Risk-free rate (per year, continuous compounding).
    pub r: f64,
    /// Dividend yield per asset.
    pub delta: Vec<f64>,
    /// Volatility per asset.
    pub sigma: Vec<f64>,
    /// Instantaneous correlation matrix, row-major `d × d`.
    pub rho: Vec<f64>,
    /// Expiry in years.
    pub maturity: f64,
    /// Strike.
    pub strike: f64,
    /// Initial asset prices.
    pub s0: Vec<f64>,
}

impl MarketParams {
    /// A symmetric market: every asset shares one volatility and dividend
    /// yield, and every distinct pair has correlation `rho`.
    pub fn symmetric(
        d: usize,
        r: f64,
        delta: f64,
        sigma: f64,
        rho: f64,
        maturity: f64,
        strike: f64,
        s0: f64,
    ) -> Self {
        let mut rho_mat = vec![rho; d * d];
        for i in 0..d {
            rho_mat[i * d + i] = 1.0;
        }
        Self {
            d,
            r,
            delta: vec![delta; d],
            sigma: vec![sigma; d],
            rho: rho_mat,
            maturity,
            strike,
            s0: vec![s0; d],
        }
    }

    /// Shape and sign checks.  Returns one message per violated rule so a
    /// caller can report all of them at once; positive semi-definiteness of
    /// the correlation matrix is checked by the Cholesky factorization in
    /// `simulate`.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let d = self.d;
        if d == 0 {
            errs.push("market.d: must be at least 1".into());
            return errs;
        }
        for (name, v) in [
            ("market.delta", &self.delta),
            ("market.sigma", &self.sigma),
            ("market.s0", &self.s0),
        ] {
            if v.len() != d {
                errs.push(format!("{name}: expected {d} entries, got {}", v.len()));
            }
        }
        if self.rho.len() != d * d {
            errs.push(format!(
                "market.rho: expected {} entries ({d}x{d}), got {}",
                d * d,
                self.rho.len()
            ));
        }
        if self.sigma.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
            errs.push("market.sigma: entries must be finite and >= 0".into());
        }
        if self.s0.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            errs.push("market.s0: entries must be finite and > 0".into());
        }
        if !(self.maturity > 0.0) {
            errs.push("market.maturity: must be > 0".into());
        }
        if !(self.strike > 0.0) {
            errs.push("market.strike: must be > 0".into());
        }
        if !self.r.is_finite() {
            errs.push("market.r: must be finite".into());
        }
        if self.rho.len() == d * d {
            for i in 0..d {
                if (self.rho[i * d + i] - 1.0).abs() > 1e-12 {
                    errs.push(format!("market.rho: diagonal entry {i} is not 1"));
                }
                for j in 0..i {
                    if (self.rho[i * d + j] - self.rho[j * d + i]).abs() > 1e-12 {
                        errs.push(format!("market.rho: entries ({i},{j})/({j},{i}) asymmetric"));
                    }
                }
            }
        }
        errs
    }
}

/// Contract payoff.  `g` is the raw payoff before flooring at zero; the
/// exercise value is `f(s) = max(g(s), 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayoffSpec {
    /// `(s_1 · s_2 ⋯ s_d)^{1/d} − K`.
    GeometricCall { strike: f64 },
    /// `max_i s_i − K`; gradient ties broken toward the lowest asset index.
    MaxCall { strike: f64 },
}

impl PayoffSpec {
    pub fn strike(&self) -> f64 {
        match *self {
            PayoffSpec::GeometricCall { strike } | PayoffSpec::MaxCall { strike } => strike,
        }
    }

    /// Raw payoff `g(s)`.  Non-finite inputs propagate as NaN.
    ///
    /// The geometric average is evaluated as `exp(mean of ln s_i)` with the
    /// inputs floored at a tiny positive value, so it stays stable in high
    /// dimension and defined on Euler paths that dip below zero.
    pub fn g(&self, s: &[f64]) -> f64 {
        match *self {
            PayoffSpec::GeometricCall { strike } => geometric_mean(s) - strike,
            PayoffSpec::MaxCall { strike } => {
                let mut best = f64::NEG_INFINITY;
                for &x in s {
                    if !x.is_finite() {
                        return f64::NAN;
                    }
                    if x > best {
                        best = x;
                    }
                }
                best - strike
            }
        }
    }

    /// Gradient of the raw payoff `g` (defined regardless of moneyness).
    pub fn g_grad(&self, s: &[f64], out: &mut [f64]) {
        match *self {
            PayoffSpec::GeometricCall { .. } => {
                let gm = geometric_mean(s);
                let d = s.len() as f64;
                for (o, &x) in out.iter_mut().zip(s) {
                    // Below the floor the clamped average no longer responds
                    // to this coordinate.
                    *o = if x > PRICE_FLOOR { gm / (d * x) } else { 0.0 };
                }
            }
            PayoffSpec::MaxCall { .. } => {
                out.fill(0.0);
                let mut best = 0usize;
                for (i, &x) in s.iter().enumerate() {
                    if x > s[best] {
                        best = i;
                    }
                }
                out[best] = 1.0;
            }
        }
    }

    /// Exercise value `f(s) = max(g(s), 0)`.
    pub fn intrinsic(&self, s: &[f64]) -> f64 {
        self.g(s).max(0.0)
    }

    /// Subgradient of the exercise value: `∇g` in the money, zero otherwise
    /// (the kink at `g = 0` takes the zero branch).
    pub fn intrinsic_grad(&self, s: &[f64], out: &mut [f64]) {
        if self.g(s) > 0.0 {
            self.g_grad(s, out);
        } else {
            out.fill(0.0);
        }
    }

    /// Softplus-smoothed exercise value `(1/κ)·ln(1 + e^{κ g})` and its
    /// gradient `σ(κ g)·∇g` (written into `grad`).  Both branches of the
    /// evaluation are overflow-free for any `κ g`.
    pub fn smoothed(&self, s: &[f64], kappa: f64, grad: &mut [f64]) -> f64 {
        debug_assert!(kappa > 0.0);
        let g = self.g(s);
        let x = kappa * g;
        let (value, sig) = if x > 0.0 {
            (g + (-x).exp().ln_1p() / kappa, 1.0 / (1.0 + (-x).exp()))
        } else {
            let e = x.exp();
            (e.ln_1p() / kappa, e / (1.0 + e))
        };
        self.g_grad(s, grad);
        for v in grad.iter_mut() {
            *v *= sig;
        }
        value
    }

    /// Smoothed value alone, when the gradient is not needed.
    pub fn smoothed_value(&self, s: &[f64], kappa: f64) -> f64 {
        let g = self.g(s);
        let x = kappa * g;
        if x > 0.0 {
            g + (-x).exp().ln_1p() / kappa
        } else {
            x.exp().ln_1p() / kappa
        }
    }
}

/// Geometric mean of a price vector with components floored at a tiny
/// positive value, so states on the zero boundary stay finite.  Non-finite
/// inputs propagate as NaN.  This is the reduced coordinate shared by the
/// payoff, the finite-difference reduction, and every consumer that maps a
/// d-asset state onto the 1-D table.
pub fn geometric_mean(s: &[f64]) -> f64 {
    // The single-asset case skips the exp∘ln round trip so that one-asset
    // payoffs are exact (the round trip costs ~1 ulp).
    if let [only] = s {
        if !only.is_finite() {
            return f64::NAN;
        }
        return only.max(PRICE_FLOOR);
    }
    let mut acc = 0.0;
    for &x in s {
        if !x.is_finite() {
            return f64::NAN;
        }
        acc += x.max(PRICE_FLOOR).ln();
    }
    (acc / s.len() as f64).exp()
}
