//! Error metrics against the finite-difference oracle: pointwise and
//! spacetime percent errors, exercise-boundary f1 score, and the
//! resampled-successor diagnostic that visualizes regression-target bias.

use crate::fdoracle::{reduce_geometric, FdError, FdGrid};
use crate::market::MarketParams;
use crate::parallel;
use crate::rng::{derived_rng, purpose, NoiseSource};
use crate::simulate::PathCube;
use crate::training::ValueSurface;
use rand_chacha::rand_core::RngCore;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("percent error undefined: {0} is zero")]
    ZeroDenominator(&'static str),
    #[error("f1 score undefined: no positives predicted or present")]
    UndefinedF1,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error(transparent)]
    Reduction(#[from] FdError),
    #[error("invalid request: {0}")]
    Invalid(String),
}

/// Percent error of a scalar against its exact value: |v−v*|/|v*|·100.
pub fn percent_error_point(v: f64, v_exact: f64) -> Result<f64, MetricsError> {
    if v_exact == 0.0 {
        return Err(MetricsError::ZeroDenominator("exact price"));
    }
    Ok((v - v_exact).abs() / v_exact.abs() * 100.0)
}

/// Percent error of a gradient against its exact value in the L2 norm:
/// ‖z−z*‖₂/‖z*‖₂·100.
pub fn percent_error_delta(z: &[f64], z_exact: &[f64]) -> Result<f64, MetricsError> {
    if z.len() != z_exact.len() {
        return Err(MetricsError::LengthMismatch {
            left: z.len(),
            right: z_exact.len(),
        });
    }
    let norm_exact: f64 = z_exact.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_exact == 0.0 {
        return Err(MetricsError::ZeroDenominator("exact delta norm"));
    }
    let diff: f64 = z
        .iter()
        .zip(z_exact)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(diff / norm_exact * 100.0)
}

/// Exercise-boundary classification quality: f1 = 2TP/(2TP+FP+FN) with
/// "exercised" as the positive class.
pub fn boundary_f1(predicted: &[bool], exact: &[bool]) -> Result<f64, MetricsError> {
    if predicted.len() != exact.len() {
        return Err(MetricsError::LengthMismatch {
            left: predicted.len(),
            right: exact.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (&p, &e) in predicted.iter().zip(exact) {
        match (p, e) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fp + fn_ == 0 {
        return Err(MetricsError::UndefinedF1);
    }
    Ok(2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64))
}

/// L1-aggregated deviations of the sampled spacetime surface from the
/// oracle, in absolute terms and as percentages.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct SpacetimeErrors {
    /// Mean |price − exact| over all included samples.
    pub abs_price: f64,
    /// Σ|price − exact| / Σ|exact| · 100.
    pub pct_price: f64,
    /// Mean |du/ds′ − exact| over all included samples.
    pub abs_delta: f64,
    /// Σ|du/ds′ − exact| / Σ|exact| · 100.
    pub pct_delta: f64,
}

/// Compares a trained spacetime surface against the 1-D reduced oracle at
/// every path sample with `n < N` (the expiry slice is the known payoff).
/// Prices compare `Y` against the interpolated grid at `s′ = (∏sᵢ)^{1/d}`;
/// derivatives compare the reduced directional derivative
/// `du/ds′ = (Σᵢ sᵢ·∂v/∂sᵢ)/s′` against the tabulated one.
pub fn spacetime_errors(
    surface: &ValueSurface,
    paths: &PathCube,
    mp: &MarketParams,
    grid: &FdGrid,
) -> Result<SpacetimeErrors, MetricsError> {
    reduce_geometric(mp)?;
    let d = mp.d;
    let m_total = surface.n_paths;
    if paths.n_paths != m_total || paths.n_steps != surface.n_steps {
        return Err(MetricsError::Invalid(
            "surface and paths describe different simulations".into(),
        ));
    }
    // Per-timestep partial sums, folded in timestep order.
    let partials: Vec<(f64, f64, f64, f64)> = parallel::map_indexed(surface.n_steps, |n| {
        let states = paths.states_at(n);
        let ys = surface.y_at(n);
        let zs = surface.z_at(n);
        let t = n as f64 * paths.dt;
        let mut sum_dp = 0.0;
        let mut sum_p = 0.0;
        let mut sum_dd = 0.0;
        let mut sum_d = 0.0;
        for m in 0..m_total {
            let s = &states[m * d..(m + 1) * d];
            let s_red = crate::market::geometric_mean(s);
            let (u, du, _) = grid.interp_price_delta(s_red, t);
            let mut dir = 0.0;
            for i in 0..d {
                dir += s[i] * zs[m * d + i];
            }
            dir /= s_red;
            sum_dp += (ys[m] - u).abs();
            sum_p += u.abs();
            sum_dd += (dir - du).abs();
            sum_d += du.abs();
        }
        (sum_dp, sum_p, sum_dd, sum_d)
    });
    let (mut sum_dp, mut sum_p, mut sum_dd, mut sum_d) = (0.0, 0.0, 0.0, 0.0);
    for (a, b, c, e) in partials {
        sum_dp += a;
        sum_p += b;
        sum_dd += c;
        sum_d += e;
    }
    if sum_p == 0.0 {
        return Err(MetricsError::ZeroDenominator("spacetime exact prices"));
    }
    if sum_d == 0.0 {
        return Err(MetricsError::ZeroDenominator("spacetime exact derivatives"));
    }
    let count = (surface.n_steps * m_total) as f64;
    Ok(SpacetimeErrors {
        abs_price: sum_dp / count,
        pct_price: sum_dp / sum_p * 100.0,
        abs_delta: sum_dd / count,
        pct_delta: sum_dd / sum_d * 100.0,
    })
}

/// One anchor state of the bias diagnostic: the Monte Carlo estimate of
/// E[e^{−rΔt}·v^{n+1}(S^{n+1}) | S^n = anchor] with its standard error,
/// next to the oracle's one-step conditional expectation.
#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct BiasRow {
    pub anchor: f64,
    pub mean_v_next: f64,
    pub se_v_next: f64,
    pub c_exact: f64,
}

/// Writes diagnostic rows as CSV (`s,mean_v_next,c_exact`).
pub fn write_bias_csv<W: std::io::Write>(rows: &[BiasRow], w: &mut W) -> std::io::Result<()> {
    writeln!(w, "s,mean_v_next,c_exact")?;
    for row in rows {
        writeln!(w, "{},{},{}", row.anchor, row.mean_v_next, row.c_exact)?;
    }
    Ok(())
}

/// Bias diagnostic against an arbitrary evaluator of the next-step value
/// function.  Anchor states are spread uniformly across the central 98% of
/// the timestep-`n` path distribution; each anchor draws `m_prime` fresh
/// one-step successors through the same Euler scheme the paths use.
#[allow(clippy::too_many_arguments)]
pub fn bias_diagnostic_with<F>(
    v_next: F,
    paths: &PathCube,
    mp: &MarketParams,
    grid: &FdGrid,
    n: usize,
    anchors: usize,
    m_prime: usize,
    seed: u64,
) -> Result<Vec<BiasRow>, MetricsError>
where
    F: Fn(f64) -> f64 + Sync,
{
    if mp.d != 1 {
        return Err(MetricsError::Invalid(format!(
            "the bias diagnostic is one-dimensional, market has d = {}",
            mp.d
        )));
    }
    if n + 1 > paths.n_steps {
        return Err(MetricsError::Invalid(format!(
            "timestep {n} has no successor on a {}-step grid",
            paths.n_steps
        )));
    }
    if anchors < 2 || m_prime < 2 {
        return Err(MetricsError::Invalid(
            "need at least 2 anchors and 2 successors".into(),
        ));
    }
    let dt = paths.dt;
    let disc = (-mp.r * dt).exp();
    let growth = 1.0 + (mp.r - mp.delta[0]) * dt;
    let sigma = mp.sigma[0];
    let sqrt_dt = dt.sqrt();

    // Anchor grid: equally spaced across the central 98% of S^n.
    let mut sorted: Vec<f64> = paths.states_at(n).to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = sorted[(0.01 * (sorted.len() - 1) as f64).round() as usize];
    let hi = sorted[(0.99 * (sorted.len() - 1) as f64).round() as usize];
    let step = (hi - lo) / (anchors - 1) as f64;

    // One independent noise stream per diagnostic run; draws are indexed by
    // (anchor, successor) so the layout is reproducible.
    let mut key_rng = derived_rng(seed, [purpose::DIAGNOSTIC, n as u64, 0]);
    let noise = NoiseSource::new(key_rng.next_u64(), 1);

    let t_next = (n + 1) as f64 * dt;
    let rows = parallel::map_indexed(anchors, |a| {
        let anchor = lo + step * a as f64;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for j in 0..m_prime {
            let phi = noise.normal(a, j, 0);
            let succ = anchor * growth + sigma * anchor * phi * sqrt_dt;
            let sample = disc * v_next(succ);
            sum += sample;
            sumsq += sample * sample;
        }
        let mean = sum / m_prime as f64;
        let var = ((sumsq / m_prime as f64 - mean * mean).max(0.0)) * m_prime as f64
            / (m_prime as f64 - 1.0);
        let se = (var / m_prime as f64).sqrt();
        let c_exact = one_step_conditional_expectation(grid, anchor, growth, sigma, sqrt_dt, disc, t_next);
        BiasRow {
            anchor,
            mean_v_next: mean,
            se_v_next: se,
            c_exact,
        }
    });
    Ok(rows)
}

/// Bias diagnostic with `v^{n+1}` read off the training surface: fresh
/// successors take the value of the nearest path sample at timestep `n+1`
/// (the per-path regression targets are only defined on the path scatter).
#[allow(clippy::too_many_arguments)]
pub fn bias_diagnostic(
    surface: &ValueSurface,
    paths: &PathCube,
    mp: &MarketParams,
    grid: &FdGrid,
    n: usize,
    anchors: usize,
    m_prime: usize,
    seed: u64,
) -> Result<Vec<BiasRow>, MetricsError> {
    if surface.n_paths != paths.n_paths || surface.n_steps != paths.n_steps {
        return Err(MetricsError::Invalid(
            "surface and paths describe different simulations".into(),
        ));
    }
    if n + 1 > surface.n_steps {
        return Err(MetricsError::Invalid(format!(
            "timestep {n} has no successor row on a {}-step surface",
            surface.n_steps
        )));
    }
    // Sorted (state, target) table at n+1 for nearest-neighbor lookups.
    let states = paths.states_at(n + 1);
    let targets = surface.v_at(n + 1);
    let mut table: Vec<(f64, f64)> = (0..surface.n_paths)
        .map(|m| (states[m], targets[m]))
        .collect();
    table.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let lookup = move |s: f64| -> f64 {
        let idx = table.partition_point(|&(x, _)| x < s);
        let candidate = |k: usize| (table[k].0 - s).abs();
        let best = if idx == 0 {
            0
        } else if idx == table.len() {
            table.len() - 1
        } else if candidate(idx - 1) <= candidate(idx) {
            idx - 1
        } else {
            idx
        };
        table[best].1
    };
    bias_diagnostic_with(lookup, paths, mp, grid, n, anchors, m_prime, seed)
}

/// Oracle one-step conditional expectation e^{−rΔt}·E[u(S′, t_{n+1})] of
/// the tabulated value under the Euler transition, by Simpson quadrature
/// over the standard-normal increment.
fn one_step_conditional_expectation(
    grid: &FdGrid,
    s: f64,
    growth: f64,
    sigma: f64,
    sqrt_dt: f64,
    disc: f64,
    t_next: f64,
) -> f64 {
    const HALF_RANGE: f64 = 8.0;
    const INTERVALS: usize = 1600; // even, so Simpson pairs up
    let h = 2.0 * HALF_RANGE / INTERVALS as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let integrand = |phi: f64| -> f64 {
        let succ = s * growth + sigma * s * phi * sqrt_dt;
        let (u, _, _) = grid.interp_price_delta(succ.max(0.0), t_next);
        u * norm * (-0.5 * phi * phi).exp()
    };
    let mut acc = integrand(-HALF_RANGE) + integrand(HALF_RANGE);
    for k in 1..INTERVALS {
        let phi = -HALF_RANGE + h * k as f64;
        acc += integrand(phi) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    disc * acc * h / 3.0
}

/// Least-squares polynomial fit `y ≈ Σ c_k·x^k` with the coefficient of
/// determination R².
pub fn polynomial_fit_r2(x: &[f64], y: &[f64], degree: usize) -> (Vec<f64>, f64) {
    assert_eq!(x.len(), y.len());
    let rows = x.len();
    let cols = degree + 1;
    assert!(rows >= cols, "need at least degree+1 samples");
    let mut a = Vec::with_capacity(rows * cols);
    for &xi in x {
        let mut p = 1.0;
        for _ in 0..cols {
            a.push(p);
            p *= xi;
        }
    }
    let a_copy = a.clone();
    let (coef, _) = crate::lsm::pivoted_qr_least_squares(&mut a, rows, cols, y);
    let mean_y = y.iter().sum::<f64>() / rows as f64;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let pred: f64 = (0..cols).map(|j| a_copy[i * cols + j] * coef[j]).sum();
        ss_res += (yi - pred) * (yi - pred);
        ss_tot += (yi - mean_y) * (yi - mean_y);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    (coef, r2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdoracle::{solve_american_1d, ExerciseStyle};
    use crate::market::PayoffSpec;
    use crate::simulate;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn point_errors_match_hand_values() {
        let err = percent_error_point(10.2286, 10.2591).unwrap();
        assert_relative_eq!(err, 0.0305 / 10.2591 * 100.0, max_relative = 1e-10);
        assert!((err - 0.30).abs() < 0.01);
        assert!(matches!(
            percent_error_point(1.0, 0.0),
            Err(MetricsError::ZeroDenominator(_))
        ));
    }

    #[test]
    fn delta_errors_are_homogeneous() {
        let z = [0.3, -0.4, 0.5];
        assert_eq!(percent_error_delta(&z, &z).unwrap(), 0.0);
        let doubled: Vec<f64> = z.iter().map(|v| 2.0 * v).collect();
        assert_relative_eq!(
            percent_error_delta(&doubled, &z).unwrap(),
            100.0,
            max_relative = 1e-12
        );
        assert!(matches!(
            percent_error_delta(&z, &[0.0, 0.0, 0.0]),
            Err(MetricsError::ZeroDenominator(_))
        ));
    }

    proptest! {
        #[test]
        fn delta_error_is_rotation_invariant(
            zx in -2.0f64..2.0, zy in -2.0f64..2.0,
            ex in 0.1f64..2.0, ey in -2.0f64..2.0,
            angle in 0.0f64..std::f64::consts::TAU,
        ) {
            let (c, s) = (angle.cos(), angle.sin());
            let rot = |v: [f64; 2]| [c * v[0] - s * v[1], s * v[0] + c * v[1]];
            let base = percent_error_delta(&[zx, zy], &[ex, ey]).unwrap();
            let rotated = percent_error_delta(&rot([zx, zy]), &rot([ex, ey])).unwrap();
            prop_assert!((base - rotated).abs() <= 1e-9 * (1.0 + base));
        }

        #[test]
        fn f1_is_permutation_invariant(flags in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let predicted: Vec<bool> = flags.iter().map(|f| f.0).collect();
            let exact: Vec<bool> = flags.iter().map(|f| f.1).collect();
            let base = boundary_f1(&predicted, &exact);
            let mut reversed_p = predicted.clone();
            let mut reversed_e = exact.clone();
            reversed_p.reverse();
            reversed_e.reverse();
            let permuted = boundary_f1(&reversed_p, &reversed_e);
            match (base, permuted) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                other => prop_assert!(false, "asymmetric outcome {:?}", other),
            }
        }
    }

    #[test]
    fn f1_formula_and_undefined_case() {
        assert_eq!(boundary_f1(&[true, true], &[true, true]).unwrap(), 1.0);
        // TP=2, FP=1, FN=1 → 4/6.
        let predicted = [true, true, true, false, false];
        let exact = [true, true, false, true, false];
        assert_relative_eq!(
            boundary_f1(&predicted, &exact).unwrap(),
            2.0 / 3.0,
            max_relative = 1e-15
        );
        assert!(matches!(
            boundary_f1(&[false, false], &[false, false]),
            Err(MetricsError::UndefinedF1)
        ));
    }

    /// Builds a surface whose Y/Z rows are read straight off the oracle for
    /// the given paths (values at s′, derivatives spread by the chain rule).
    fn surface_from_oracle(
        paths: &PathCube,
        grid: &crate::fdoracle::FdGrid,
        d: usize,
    ) -> ValueSurface {
        let m_total = paths.n_paths;
        let mut surface = ValueSurface {
            n_steps: paths.n_steps,
            n_paths: m_total,
            d,
            y: vec![0.0; (paths.n_steps + 1) * m_total],
            z: vec![0.0; (paths.n_steps + 1) * m_total * d],
            exercised: vec![false; (paths.n_steps + 1) * m_total],
            v: vec![0.0; (paths.n_steps + 1) * m_total],
        };
        for n in 0..=paths.n_steps {
            let t = n as f64 * paths.dt;
            for m in 0..m_total {
                let s = paths.state(n, m);
                let s_red = crate::market::geometric_mean(s);
                let (u, du, _) = grid.interp_price_delta(s_red, t);
                surface.y[n * m_total + m] = u;
                for i in 0..d {
                    surface.z[(n * m_total + m) * d + i] = du * s_red / (d as f64 * s[i]);
                }
            }
        }
        surface
    }

    #[test]
    fn spacetime_errors_vanish_on_the_oracle_itself() {
        let mp = MarketParams::symmetric(2, 0.05, 0.1, 0.2, 0.5, 1.0, 100.0, 100.0);
        let red = reduce_geometric(&mp).unwrap();
        let strike = 100.0;
        let grid = solve_american_1d(
            red.sigma,
            red.drift,
            red.r,
            strike,
            1.0,
            |s: f64| (s - strike).max(0.0),
            513,
            200,
            ExerciseStyle::American,
        )
        .unwrap();
        let paths = simulate::generate_paths(&mp, 8, 60, 19).unwrap();
        let mut surface = surface_from_oracle(&paths, &grid, 2);
        let errs = spacetime_errors(&surface, &paths, &mp, &grid).unwrap();
        assert_eq!(errs.abs_price, 0.0);
        assert_eq!(errs.pct_price, 0.0);
        assert!(errs.abs_delta < 1e-14, "delta err {}", errs.abs_delta);

        // Shifting every price sample by a constant moves the absolute
        // error by exactly that constant.
        for yv in surface.y.iter_mut() {
            *yv += 0.05;
        }
        let errs = spacetime_errors(&surface, &paths, &mp, &grid).unwrap();
        assert_relative_eq!(errs.abs_price, 0.05, max_relative = 1e-12);
        assert!(errs.pct_price > 0.0);
    }

    #[test]
    fn spacetime_reduction_guard_rejects_asymmetric_markets() {
        let mut mp = MarketParams::symmetric(2, 0.05, 0.1, 0.2, 0.5, 1.0, 100.0, 100.0);
        mp.sigma[1] = 0.3;
        let grid = solve_american_1d(
            0.2,
            0.0,
            0.05,
            100.0,
            1.0,
            |s: f64| (s - 100.0).max(0.0),
            129,
            50,
            ExerciseStyle::American,
        )
        .unwrap();
        let paths = simulate::generate_paths(&mp, 4, 10, 1).unwrap();
        let surface = surface_from_oracle(&paths, &grid, 2);
        assert!(matches!(
            spacetime_errors(&surface, &paths, &mp, &grid),
            Err(MetricsError::Reduction(_))
        ));
    }

    #[test]
    fn oracle_fed_diagnostic_agrees_within_monte_carlo_error() {
        let mp = MarketParams::symmetric(1, 0.05, 0.02, 0.25, 0.0, 1.0, 100.0, 100.0);
        let strike = 100.0;
        let grid = solve_american_1d(
            mp.sigma[0],
            mp.r - mp.delta[0],
            mp.r,
            strike,
            1.0,
            |s: f64| (s - strike).max(0.0),
            2049,
            400,
            ExerciseStyle::American,
        )
        .unwrap();
        let paths = simulate::generate_paths(&mp, 20, 4000, 5).unwrap();
        let n = 10;
        let t_next = (n + 1) as f64 * paths.dt;
        let rows = bias_diagnostic_with(
            |s: f64| grid.interp_price_delta(s.max(0.0), t_next).0,
            &paths,
            &mp,
            &grid,
            n,
            21,
            2000,
            78,
        )
        .unwrap();
        assert_eq!(rows.len(), 21);
        for row in &rows {
            let dev = (row.mean_v_next - row.c_exact).abs();
            assert!(
                dev <= 3.0 * row.se_v_next + 1e-9,
                "anchor {}: deviation {dev} vs 3·SE {}",
                row.anchor,
                3.0 * row.se_v_next
            );
        }
        // Anchors are increasing and equally spaced.
        let gap = rows[1].anchor - rows[0].anchor;
        for w in rows.windows(2) {
            assert_relative_eq!(w[1].anchor - w[0].anchor, gap, max_relative = 1e-9);
        }
    }

    #[test]
    fn pure_chain_targets_are_noisier_than_blended_targets() {
        // Two micro training runs that differ only in θ: the θ=0 regression
        // targets are raw discounted payoff chains, whose per-anchor sample
        // variance must exceed the θ=0.5 blend's.
        let mp = MarketParams::symmetric(1, 0.05, 0.1, 0.3, 0.0, 0.5, 100.0, 100.0);
        let payoff = PayoffSpec::GeometricCall { strike: 100.0 };
        let strike = 100.0;
        let grid = solve_american_1d(
            mp.sigma[0],
            mp.r - mp.delta[0],
            mp.r,
            strike,
            0.5,
            |s: f64| (s - strike).max(0.0),
            513,
            120,
            ExerciseStyle::American,
        )
        .unwrap();
        let run = |theta: f64| {
            let mut cfg = crate::training::TrainConfig::defaults(1, 6, 4000, 99);
            cfg.theta = theta;
            cfg.members = 1;
            cfg.hidden_layers = 2;
            cfg.width = 6;
            cfg.steps = 150;
            cfg.batch = 256;
            let (_, surface, _) = crate::training::backward_sweep(&mp, &payoff, &cfg).unwrap();
            let paths = simulate::generate_paths(&mp, 6, 4000, 99).unwrap();
            let rows = bias_diagnostic(&surface, &paths, &mp, &grid, 3, 21, 2000, 5).unwrap();
            rows.iter()
                .map(|r| r.se_v_next * r.se_v_next)
                .sum::<f64>()

        };
        let var_chain = run(0.0);
        let var_blend = run(0.5);
        assert!(
            var_chain > var_blend,
            "chain variance {var_chain} should exceed blend variance {var_blend}"
        );
    }

    #[test]
    fn quadratic_fit_recovers_exact_polynomials() {
        let x: Vec<f64> = (0..12).map(|k| k as f64).collect();
        let y: Vec<f64> = x.iter().map(|&v| 1.5 - 0.25 * v + 2.0 * v * v).collect();
        let (coef, r2) = polynomial_fit_r2(&x, &y, 2);
        assert_relative_eq!(coef[0], 1.5, max_relative = 1e-9);
        assert_relative_eq!(coef[1], -0.25, max_relative = 1e-9);
        assert_relative_eq!(coef[2], 2.0, max_relative = 1e-9);
        assert!(r2 > 1.0 - 1e-12);
    }

    #[test]
    fn bias_rows_serialize_to_csv() {
        let rows = vec![
            BiasRow {
                anchor: 90.0,
                mean_v_next: 1.25,
                se_v_next: 0.01,
                c_exact: 1.24,
            },
            BiasRow {
                anchor: 95.0,
                mean_v_next: 2.5,
                se_v_next: 0.02,
                c_exact: 2.52,
            },
        ];
        let mut buf = Vec::new();
        write_bias_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("s,mean_v_next,c_exact"));
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("90,1.25,1.24"));
    }
}
