//! Longstaff–Schwartz baseline: backward induction with a degree-χ
//! monomial regression of discounted realized payoffs on the current
//! state, exercise where intrinsic value beats the fitted continuation,
//! and pathwise time-zero deltas from the stopping times.

use crate::market::{MarketParams, PayoffSpec};
use crate::parallel;
use crate::simulate::PathCube;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LsmError {
    #[error(
        "regression would need {predicted} floats (limit {limit}); \
         refusing to allocate"
    )]
    MemoryGuard { predicted: u128, limit: u128 },
    #[error("monomial overflow at path {path}: state too large for degree {chi}")]
    Overflow { path: usize, chi: usize },
    #[error("invalid arguments: {0}")]
    Invalid(String),
}

/// Number of monomials in d variables of total degree ≤ χ: C(d+χ, d).
pub fn basis_count(d: usize, chi: usize) -> u128 {
    // Product form of the binomial coefficient, exact in u128 for any
    // realistic (d, χ).
    let mut num: u128 = 1;
    let mut den: u128 = 1;
    for k in 1..=chi as u128 {
        num *= d as u128 + k;
        den *= k;
        let g = gcd(num, den);
        num /= g;
        den /= g;
    }
    num / den
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Floats held live by an LSM run: the path cube (N·M·d), one basis matrix
/// column block per path (C(d+χ,d)·M), and the target vector (M).
pub fn predicted_memory_floats(d: usize, chi: usize, n_steps: usize, n_paths: usize) -> u128 {
    let m = n_paths as u128;
    (n_steps as u128) * m * (d as u128) + basis_count(d, chi) * m + m
}

/// Monomial basis in graded lexicographic order: degree 0 first, then
/// within each total degree the exponent tuples in lexicographically
/// descending order (d=2, χ=2: 1, s₁, s₂, s₁², s₁s₂, s₂²).
#[derive(Clone, Debug)]
pub struct MonomialBasis {
    pub d: usize,
    pub chi: usize,
    pub exponents: Vec<Vec<u32>>,
    /// Inputs are divided by the strike before exponentiation so the
    /// columns stay O(1) at degree 4.
    pub scale: f64,
}

impl MonomialBasis {
    pub fn new(d: usize, chi: usize, strike: f64) -> Self {
        let mut exponents = Vec::new();
        for degree in 0..=chi as u32 {
            let mut tuple = vec![0u32; d];
            enumerate_degree(degree, 0, &mut tuple, &mut exponents);
        }
        MonomialBasis {
            d,
            chi,
            exponents,
            scale: 1.0 / strike,
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Evaluates every monomial at `s`, writing into `out`.
    pub fn eval(&self, s: &[f64], out: &mut [f64]) -> Result<(), LsmError> {
        debug_assert_eq!(s.len(), self.d);
        debug_assert_eq!(out.len(), self.len());
        // Power table: x_i^p for p ≤ χ.
        let chi = self.chi;
        let mut powers = vec![1.0; self.d * (chi + 1)];
        for i in 0..self.d {
            let x = s[i] * self.scale;
            for p in 1..=chi {
                powers[i * (chi + 1) + p] = powers[i * (chi + 1) + p - 1] * x;
            }
        }
        for (j, expo) in self.exponents.iter().enumerate() {
            let mut v = 1.0;
            for i in 0..self.d {
                v *= powers[i * (chi + 1) + expo[i] as usize];
            }
            out[j] = v;
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(LsmError::Overflow { path: 0, chi });
        }
        Ok(())
    }
}

/// All exponent tuples of exact total `degree` over positions `from..`,
/// descending in the leading exponent (graded-lex within the degree).
fn enumerate_degree(degree: u32, from: usize, tuple: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if from == tuple.len() - 1 {
        tuple[from] = degree;
        out.push(tuple.clone());
        tuple[from] = 0;
        return;
    }
    for a in (0..=degree).rev() {
        tuple[from] = a;
        enumerate_degree(degree - a, from + 1, tuple, out);
        tuple[from] = 0;
    }
}

/// Fitted baseline: stopping times, time-zero estimates, and the
/// per-timestep regression coefficients (absent where no path was in the
/// money).
#[derive(Clone, Debug)]
pub struct LsmResult {
    /// Stopping timestep per path (N where never exercised earlier).
    pub tau_idx: Vec<usize>,
    /// Discounted realized payoff per path, e^{−rτ}·f(S(τ)).
    pub discounted_payoffs: Vec<f64>,
    pub price0: f64,
    pub price0_se: f64,
    pub delta0: Vec<f64>,
    pub delta0_se: Vec<f64>,
    /// Regression coefficients per timestep 1..N−1 (index 0 and N unused).
    pub coefficients: Vec<Option<Vec<f64>>>,
    /// Timesteps whose regression was rank-deficient.
    pub rank_deficient_steps: Vec<usize>,
}

/// Default allocation guard: one billion floats (8 GB of regressors).
pub const DEFAULT_MEMORY_LIMIT_FLOATS: u128 = 1_000_000_000;

/// Runs the Longstaff–Schwartz backward induction on simulated paths.
/// Regression happens at timesteps N−1 … 1 over in-the-money paths only;
/// the time-zero price is the average discounted payoff at the resulting
/// stopping times.
pub fn lsm_fit(
    paths: &PathCube,
    mp: &MarketParams,
    payoff: &PayoffSpec,
    chi: usize,
    memory_limit_floats: u128,
) -> Result<LsmResult, LsmError> {
    let d = mp.d;
    let m_total = paths.n_paths;
    let n_steps = paths.n_steps;
    if m_total < 2 {
        return Err(LsmError::Invalid("need at least 2 paths".into()));
    }
    let predicted = predicted_memory_floats(d, chi, n_steps, m_total);
    if predicted > memory_limit_floats {
        return Err(LsmError::MemoryGuard {
            predicted,
            limit: memory_limit_floats,
        });
    }
    let basis = MonomialBasis::new(d, chi, payoff.strike());
    let n_basis = basis.len();
    let dt = paths.dt;
    let disc = (-mp.r * dt).exp();

    // Realized discounted payoff (as seen from the current timestep) and
    // the stopping index per path.
    let mut tau_idx = vec![n_steps; m_total];
    let mut cash: Vec<f64> = {
        let states = paths.states_at(n_steps);
        (0..m_total)
            .map(|m| payoff.intrinsic(&states[m * d..(m + 1) * d]))
            .collect()
    };

    let mut coefficients: Vec<Option<Vec<f64>>> = vec![None; n_steps + 1];
    let mut rank_deficient_steps = Vec::new();

    for n in (1..n_steps).rev() {
        // Discount the cash flows one step back.
        for c in cash.iter_mut() {
            *c *= disc;
        }
        let states = paths.states_at(n);
        let intrinsic: Vec<f64> = parallel::map_indexed(m_total, |m| {
            payoff.intrinsic(&states[m * d..(m + 1) * d])
        });
        let itm: Vec<usize> = (0..m_total).filter(|&m| intrinsic[m] > 0.0).collect();
        if itm.len() < n_basis {
            // Not enough in-the-money paths to identify the fit; keep
            // continuing everywhere.
            continue;
        }
        // Regression matrix over the in-the-money set, filled in
        // path-index order by disjoint row blocks.
        const ROWS_PER_BLOCK: usize = 2048;
        let n_blocks = itm.len().div_ceil(ROWS_PER_BLOCK);
        let blocks: Vec<Result<Vec<f64>, LsmError>> = parallel::map_indexed(n_blocks, |c| {
            let lo = c * ROWS_PER_BLOCK;
            let hi = (lo + ROWS_PER_BLOCK).min(itm.len());
            let mut block = vec![0.0; (hi - lo) * n_basis];
            for (k, &m) in itm[lo..hi].iter().enumerate() {
                basis
                    .eval(
                        &states[m * d..(m + 1) * d],
                        &mut block[k * n_basis..(k + 1) * n_basis],
                    )
                    .map_err(|_| LsmError::Overflow { path: m, chi })?;
            }
            Ok(block)
        });
        let mut a = Vec::with_capacity(itm.len() * n_basis);
        for b in blocks {
            a.extend_from_slice(&b?);
        }
        let y: Vec<f64> = itm.iter().map(|&m| cash[m]).collect();
        let (coef, rank) = pivoted_qr_least_squares(&mut a, itm.len(), n_basis, &y);
        if rank < n_basis {
            log::warn!(
                "regression at timestep {n} is rank-deficient ({rank}/{n_basis}); \
                 using minimal-norm pivoted solution"
            );
            rank_deficient_steps.push(n);
        }
        // Exercise where intrinsic beats the fitted continuation.  The QR
        // destroyed the matrix, so the basis rows are re-evaluated; the
        // first pass already proved them finite.
        let continuation: Vec<f64> = parallel::map_indexed(itm.len(), |row| {
            let m = itm[row];
            let mut scratch = vec![0.0; n_basis];
            let _ = basis.eval(&states[m * d..(m + 1) * d], &mut scratch);
            scratch.iter().zip(&coef).map(|(b, c)| b * c).sum()
        });
        for (row, &m) in itm.iter().enumerate() {
            if intrinsic[m] >= continuation[row] {
                tau_idx[m] = n;
                cash[m] = intrinsic[m];
            }
        }
        coefficients[n] = Some(coef);
    }
    // The realized stopping rule determines every t=0 estimate; the same
    // estimators serve the network model, so comparisons share code.
    let discounted_payoffs = crate::hedging::discounted_payoffs(paths, &tau_idx, mp.r, payoff);
    let (price0, price0_se) = crate::hedging::mean_and_se(&discounted_payoffs);
    let (delta0, delta0_se) = crate::hedging::initial_delta(paths, &tau_idx, mp, payoff);

    Ok(LsmResult {
        tau_idx,
        discounted_payoffs,
        price0,
        price0_se,
        delta0,
        delta0_se,
        coefficients,
        rank_deficient_steps,
    })
}

/// Column-pivoted Householder QR least squares for the tall system
/// `A x ≈ y` (`rows × cols`, row-major, `rows ≥ cols`).  Returns the
/// coefficient vector (zeros in directions beyond the numerical rank) and
/// the numerical rank.  `a` is destroyed.
pub fn pivoted_qr_least_squares(
    a: &mut [f64],
    rows: usize,
    cols: usize,
    y: &[f64],
) -> (Vec<f64>, usize) {
    debug_assert!(rows >= cols);
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    let mut rhs = y.to_vec();
    let mut perm: Vec<usize> = (0..cols).collect();
    // Remaining squared norms per column, updated as rows are eliminated.
    let mut col_norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| a[i * cols + j] * a[i * cols + j]).sum())
        .collect();
    let norm_floor = col_norms.iter().cloned().fold(0.0f64, f64::max) * 1e-24;

    let mut rank = cols;
    for k in 0..cols {
        // Pivot: bring the column with the largest remaining norm to k.
        let (piv, &piv_norm) = col_norms[k..]
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .map(|(off, v)| (k + off, v))
            .unwrap();
        if piv_norm <= norm_floor {
            rank = k;
            break;
        }
        if piv != k {
            for i in 0..rows {
                a.swap(i * cols + k, i * cols + piv);
            }
            col_norms.swap(k, piv);
            perm.swap(k, piv);
        }
        // Householder vector for rows k.. of column k.
        let mut sigma = 0.0;
        for i in k..rows {
            sigma += a[i * cols + k] * a[i * cols + k];
        }
        let norm = sigma.sqrt();
        if norm == 0.0 {
            rank = k;
            break;
        }
        let akk = a[k * cols + k];
        let alpha = if akk >= 0.0 { -norm } else { norm };
        // v = x − alpha·e1, stored in place of column k below the diagonal;
        // v_k kept separately.
        let vk = akk - alpha;
        let vnorm_sq = sigma - akk * akk + vk * vk;
        if vnorm_sq <= 0.0 {
            rank = k;
            break;
        }
        let two_over = 2.0 / vnorm_sq;
        // Apply H = I − 2vvᵀ/‖v‖² to the remaining columns and the rhs.
        for j in (k + 1)..cols {
            let mut dot = vk * a[k * cols + j];
            for i in (k + 1)..rows {
                dot += a[i * cols + k] * a[i * cols + j];
            }
            let f = dot * two_over;
            a[k * cols + j] -= f * vk;
            for i in (k + 1)..rows {
                a[i * cols + j] -= f * a[i * cols + k];
            }
        }
        let mut dot = vk * rhs[k];
        for i in (k + 1)..rows {
            dot += a[i * cols + k] * rhs[i];
        }
        let f = dot * two_over;
        rhs[k] -= f * vk;
        for i in (k + 1)..rows {
            rhs[i] -= f * a[i * cols + k];
        }
        a[k * cols + k] = alpha;
        // Downdate remaining column norms.
        for j in (k + 1)..cols {
            col_norms[j] -= a[k * cols + j] * a[k * cols + j];
            if col_norms[j] < 0.0 {
                col_norms[j] = 0.0;
            }
        }
    }
    // Back-substitute R[0..rank, 0..rank]·x = rhs[0..rank].
    let mut x_perm = vec![0.0; cols];
    for k in (0..rank).rev() {
        let mut v = rhs[k];
        for j in (k + 1)..rank {
            v -= a[k * cols + j] * x_perm[j];
        }
        x_perm[k] = v / a[k * cols + k];
    }
    let mut x = vec![0.0; cols];
    for k in 0..cols {
        x[perm[k]] = x_perm[k];
    }
    (x, rank)
}
