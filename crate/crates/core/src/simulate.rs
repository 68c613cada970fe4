//! Correlated Brownian increments and Euler-discretized lognormal paths.
//!
//! The scheme advances prices in price space,
//!
//! ```text
//! S_i^{n+1} = (1 + (r − δ_i)Δt)·S_i^n + σ_i·S_i^n·ΔW_i^n,
//! ΔW^n = L·φ^n·√Δt,      L·Lᵀ = ρ,   φ i.i.d. standard normal,
//! ```
//!
//! storing both the prices and the increments so the training loss can reuse
//! the exact noise that produced each transition.  Negative prices are
//! permitted by the scheme (consumers clamp defensively); no log-Euler
//! transformation is applied.

use crate::market::MarketParams;
use crate::parallel;
use crate::rng::NoiseSource;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimulateError {
    #[error("correlation matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("invalid market parameters: {0}")]
    InvalidMarket(String),
    #[error("invalid path request: {0}")]
    InvalidRequest(String),
}

/// Simulated paths: prices `S[n][m][i]` for `n = 0..=N` and the correlated,
/// √Δt-scaled increments `dW[n][m][i]` for `n = 0..N`, stored time-major so
/// a whole timestep is one contiguous `M × d` block.
#[derive(Clone, Debug)]
pub struct PathCube {
    pub n_steps: usize,
    pub n_paths: usize,
    pub d: usize,
    pub dt: f64,
    pub seed: u64,
    s: Vec<f64>,
    dw: Vec<f64>,
}

impl PathCube {
    /// Prices of all paths at timestep `n` as an `M × d` row-major block.
    pub fn states_at(&self, n: usize) -> &[f64] {
        let stride = self.n_paths * self.d;
        &self.s[n * stride..(n + 1) * stride]
    }

    /// Price vector of path `m` at timestep `n`.
    pub fn state(&self, n: usize, m: usize) -> &[f64] {
        let base = (n * self.n_paths + m) * self.d;
        &self.s[base..base + self.d]
    }

    /// Increments `ΔW` of the step from `n` to `n+1`, as an `M × d` block.
    pub fn dw_at(&self, n: usize) -> &[f64] {
        let stride = self.n_paths * self.d;
        &self.dw[n * stride..(n + 1) * stride]
    }

    /// Increment vector of path `m` for the step from `n` to `n+1`.
    pub fn dw(&self, n: usize, m: usize) -> &[f64] {
        let base = (n * self.n_paths + m) * self.d;
        &self.dw[base..base + self.d]
    }

    /// Calendar time of timestep `n`.
    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Writes the price cube as CSV with header `n,m,i,S`.
    pub fn dump_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "n,m,i,S")?;
        for n in 0..=self.n_steps {
            for m in 0..self.n_paths {
                let row = self.state(n, m);
                for (i, v) in row.iter().enumerate() {
                    writeln!(w, "{n},{m},{i},{v}")?;
                }
            }
        }
        Ok(())
    }
}

/// Lower-triangular Cholesky factor of a `d × d` correlation matrix
/// (row-major), failing with the pivot index on a non-positive-definite
/// input.
pub fn cholesky(rho: &[f64], d: usize) -> Result<Vec<f64>, SimulateError> {
    assert_eq!(rho.len(), d * d, "rho must be d*d entries");
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut acc = rho[i * d + j];
            for k in 0..j {
                acc -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if acc <= 1e-14 {
                    return Err(SimulateError::NotPositiveDefinite { pivot: i });
                }
                l[i * d + i] = acc.sqrt();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// Generates `n_paths` Euler paths over `n_steps` timesteps.  Deterministic
/// for fixed `(mp, n_steps, n_paths, seed)`, and path `m` is identical no
/// matter how many other paths the run asks for.
pub fn generate_paths(
    mp: &MarketParams,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathCube, SimulateError> {
    let errs = mp.validation_errors();
    if !errs.is_empty() {
        return Err(SimulateError::InvalidMarket(errs.join("; ")));
    }
    if n_steps < 1 || n_paths < 1 {
        return Err(SimulateError::InvalidRequest(format!(
            "need n_steps >= 1 and n_paths >= 1, got ({n_steps}, {n_paths})"
        )));
    }
    let d = mp.d;
    let chol = cholesky(&mp.rho, d)?;
    let dt = mp.maturity / n_steps as f64;
    let sqrt_dt = dt.sqrt();
    let noise = NoiseSource::new(seed, d);

    let stride = n_paths * d;
    let mut s = vec![0.0; (n_steps + 1) * stride];
    let mut dw = vec![0.0; n_steps * stride];
    for row in s[..stride].chunks_mut(d) {
        row.copy_from_slice(&mp.s0);
    }

    // March one timestep at a time; within a step every path is independent.
    const PATHS_PER_CHUNK: usize = 256;
    for n in 0..n_steps {
        let (head, tail) = s.split_at_mut((n + 1) * stride);
        let prev = &head[n * stride..];
        let next = &mut tail[..stride];
        let dw_slab = &mut dw[n * stride..(n + 1) * stride];
        parallel::for_each_chunk_pair_mut(
            next,
            PATHS_PER_CHUNK * d,
            dw_slab,
            PATHS_PER_CHUNK * d,
            |c, next_chunk, dw_chunk| {
                let mut phi = vec![0.0; d];
                let m0 = c * PATHS_PER_CHUNK;
                for (k, (srow, wrow)) in next_chunk
                    .chunks_mut(d)
                    .zip(dw_chunk.chunks_mut(d))
                    .enumerate()
                {
                    let m = m0 + k;
                    noise.fill_normals(n, m, &mut phi);
                    let prow = &prev[m * d..(m + 1) * d];
                    for i in 0..d {
                        let mut corr = 0.0;
                        for j in 0..=i {
                            corr += chol[i * d + j] * phi[j];
                        }
                        let dwi = corr * sqrt_dt;
                        wrow[i] = dwi;
                        srow[i] = (1.0 + (mp.r - mp.delta[i]) * dt) * prow[i]
                            + mp.sigma[i] * prow[i] * dwi;
                    }
                }
            },
        );
    }

    Ok(PathCube {
        n_steps,
        n_paths,
        d,
        dt,
        seed,
        s,
        dw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::MarketParams;
    use approx::assert_relative_eq;

    fn flat_market(d: usize, r: f64, delta: f64, sigma: f64, rho: f64) -> MarketParams {
        MarketParams::symmetric(d, r, delta, sigma, rho, 1.0, 100.0, 100.0)
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], 3).unwrap();
        assert_eq!(l, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn cholesky_two_assets_reconstructs_rho() {
        let rho = [1.0, 0.3, 0.3, 1.0];
        let l = cholesky(&rho, 2).unwrap();
        assert_eq!(l[0], 1.0);
        assert_eq!(l[2], 0.3);
        assert_relative_eq!(l[3], 0.91f64.sqrt(), max_relative = 1e-15);
        // Check L·Lᵀ = ρ entrywise.
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += l[i * 2 + k] * l[j * 2 + k];
                }
                assert!((acc - rho[i * 2 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_super_unit_correlation() {
        let rho = 1.0 + 1e-6;
        let err = cholesky(&[1.0, rho, rho, 1.0], 2).unwrap_err();
        match err {
            SimulateError::NotPositiveDefinite { pivot } => assert_eq!(pivot, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn zero_volatility_paths_follow_the_deterministic_drift() {
        let mp = flat_market(2, 0.0, 0.0, 0.0, 0.3);
        let paths = generate_paths(&mp, 5, 4, 1).unwrap();
        for n in 0..=5 {
            for m in 0..4 {
                assert_eq!(paths.state(n, m), &[100.0, 100.0]);
            }
        }

        let mut mp = flat_market(1, 0.05, 0.0, 0.0, 0.0);
        mp.maturity = 0.01; // one step of Δt = 0.01
        let paths = generate_paths(&mp, 1, 3, 9).unwrap();
        for m in 0..3 {
            assert_relative_eq!(paths.state(1, m)[0], 100.05, max_relative = 1e-15);
        }
    }

    #[test]
    fn paths_are_bit_identical_for_equal_seeds_and_independent_of_count() {
        let mp = flat_market(3, 0.05, 0.1, 0.2, 0.5);
        let a = generate_paths(&mp, 8, 50, 42).unwrap();
        let b = generate_paths(&mp, 8, 50, 42).unwrap();
        assert_eq!(a.s, b.s);
        assert_eq!(a.dw, b.dw);
        let c = generate_paths(&mp, 8, 200, 42).unwrap();
        for n in 0..=8 {
            for m in 0..50 {
                assert_eq!(a.state(n, m), c.state(n, m), "path {m} changed with M");
            }
        }
        let d = generate_paths(&mp, 8, 50, 43).unwrap();
        assert_ne!(a.s, d.s);
    }

    #[test]
    fn discrete_scheme_is_a_martingale_without_carry() {
        let mp = flat_market(1, 0.0, 0.0, 0.25, 0.0);
        let n_paths = 1_000_000;
        let paths = generate_paths(&mp, 4, n_paths, 7).unwrap();
        let terminal = paths.states_at(4);
        let mean: f64 = terminal.iter().sum::<f64>() / n_paths as f64;
        let var: f64 = terminal.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / (n_paths - 1) as f64;
        let se = (var / n_paths as f64).sqrt();
        assert!(
            (mean - 100.0).abs() < 3.0 * se,
            "terminal mean {mean} vs 100 (se {se})"
        );
    }

    #[test]
    fn drifted_mean_matches_compound_growth() {
        let mp = flat_market(1, 0.06, 0.01, 0.2, 0.0);
        let n = 10;
        let n_paths = 400_000;
        let paths = generate_paths(&mp, n, n_paths, 3).unwrap();
        let dt = paths.dt;
        let expect = 100.0 * (1.0 + 0.05 * dt).powi(n as i32);
        let terminal = paths.states_at(n);
        let mean: f64 = terminal.iter().sum::<f64>() / n_paths as f64;
        let var: f64 = terminal.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>()
            / (n_paths - 1) as f64;
        let se = (var / n_paths as f64).sqrt();
        assert!(
            (mean - expect).abs() < 4.0 * se,
            "terminal mean {mean} vs {expect} (se {se})"
        );
    }

    #[test]
    fn increment_moments_match_the_correlation() {
        let rho = 0.3;
        let mp = flat_market(2, 0.0, 0.0, 0.2, rho);
        let n_paths = 1_000_000;
        let paths = generate_paths(&mp, 1, n_paths, 11).unwrap();
        let dt = paths.dt;
        let dw = paths.dw_at(0);
        let inv = 1.0 / n_paths as f64;
        let (mut m0, mut m1, mut v0, mut v1, mut cov) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for w in dw.chunks(2) {
            m0 += w[0];
            m1 += w[1];
            v0 += w[0] * w[0];
            v1 += w[1] * w[1];
            cov += w[0] * w[1];
        }
        m0 *= inv;
        m1 *= inv;
        v0 *= inv;
        v1 *= inv;
        cov *= inv;
        let se_mean = (dt * inv).sqrt();
        assert!(m0.abs() < 4.0 * se_mean && m1.abs() < 4.0 * se_mean);
        // Var(z²) = 2 and Var(z₁z₂) = 1 + ρ² for standard normals.
        let se_var = dt * (2.0 * inv).sqrt();
        let se_cov = dt * ((1.0 + rho * rho) * inv).sqrt();
        assert!((v0 - dt).abs() < 4.0 * se_var, "var0 {v0} vs {dt}");
        assert!((v1 - dt).abs() < 4.0 * se_var, "var1 {v1} vs {dt}");
        assert!((cov - rho * dt).abs() < 4.0 * se_cov, "cov {cov} vs {}", rho * dt);
    }

    #[test]
    fn csv_dump_has_header_and_every_cell() {
        let mp = flat_market(2, 0.0, 0.0, 0.1, 0.0);
        let paths = generate_paths(&mp, 2, 3, 5).unwrap();
        let mut buf = Vec::new();
        paths.dump_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("n,m,i,S"));
        assert_eq!(text.lines().count(), 1 + 3 * 3 * 2);
        assert!(text.lines().nth(1).unwrap().starts_with("0,0,0,100"));
    }
}
