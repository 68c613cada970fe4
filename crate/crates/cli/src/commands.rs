//! Subcommand implementations.  Each command reads the validated config,
//! runs one pipeline stage, and leaves `results.json` + `manifest.json`
//! (plus stage-specific CSV/checkpoint artifacts) in the output directory.

use std::path::{Path, PathBuf};

use serde_json::json;

use bsdenet::checkpoint;
use bsdenet::fdoracle::{reduce_geometric, solve_american_1d, ExerciseStyle, FdGrid};
use bsdenet::hedging::{self, ModelProvider, ReducedFdProvider};
use bsdenet::lsm;
use bsdenet::market::{geometric_mean, MarketParams, PayoffSpec};
use bsdenet::metrics::{self, MetricsError};
use bsdenet::netcore::EnsembleModel;
use bsdenet::simulate::{generate_paths, PathCube};
use bsdenet::training::{backward_sweep, dump_train_log, TrainConfig, TrainError, ValueSurface};

use crate::artifacts::{
    BigCount, DeltaBlock, ErrorBlock, HedgeBlock, MemoryBlock, PriceBlock, Results, RunDir,
};
use crate::config::RunConfig;
use crate::CliError;

fn rt(e: impl std::fmt::Display) -> CliError {
    CliError::runtime(e.to_string())
}

fn build_paths(
    mp: &MarketParams,
    n_steps: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathCube, CliError> {
    generate_paths(mp, n_steps, n_paths, seed).map_err(rt)
}

/// Reduces the market to one dimension and solves the exercise problem on
/// the oracle grid.  Only geometric payoffs collapse exactly (any payoff
/// does at d = 1), so everything else is rejected as a config error.
fn solve_reduced_grid(cfg: &RunConfig, mp: &MarketParams) -> Result<FdGrid, CliError> {
    let payoff = cfg.payoff_spec().expect("validated");
    if mp.d > 1 && !matches!(payoff, PayoffSpec::GeometricCall { .. }) {
        return Err(CliError::Validation(vec![format!(
            "payoff.kind: {:?} does not reduce to one dimension for d = {} (only \
             \"geometric_call\" does); no exact reference is available",
            cfg.payoff.kind, mp.d
        )]));
    }
    let red = reduce_geometric(mp).map_err(|e| CliError::Validation(vec![format!("market: {e}")]))?;
    let strike = mp.strike;
    solve_american_1d(
        red.sigma,
        red.drift,
        red.r,
        strike,
        mp.maturity,
        |s| (s - strike).max(0.0),
        cfg.oracle.nodes,
        cfg.oracle.steps,
        ExerciseStyle::American,
    )
    .map_err(rt)
}

fn load_model(path: &Path) -> Result<EnsembleModel, CliError> {
    checkpoint::load_from(path)
        .map_err(|e| CliError::runtime(format!("cannot load checkpoint {}: {e}", path.display())))
}

/// Default checkpoint location: where `train` puts it.
pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    Path::new(&cfg.output_dir).join("model.ckpt")
}

pub fn cmd_simulate(cfg: &RunConfig, n_paths: Option<usize>) -> Result<(), CliError> {
    let mp = cfg.market_params();
    let n_paths = n_paths.unwrap_or_else(|| cfg.lsm_paths());
    let mut run = RunDir::create(cfg, "simulate")?;
    let cube = run
        .stage("simulate", || {
            build_paths(&mp, cfg.train.n_steps, n_paths, cfg.seed)
        })?;
    run.write_csv("paths.csv", |w| cube.dump_csv(w))?;
    let mut results = Results::new("simulate");
    results.details = Some(json!({
        "n_steps": cube.n_steps,
        "n_paths": cube.n_paths,
        "d": cube.d,
        "file": "paths.csv",
    }));
    run.finish(results)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let mp = cfg.market_params();
    let payoff = cfg.payoff_spec().expect("validated");
    let tc = cfg.train_config();
    let mut run = RunDir::create(cfg, "train")?;
    let (model, surface, log_rows) = run
        .stage("train", || backward_sweep(&mp, &payoff, &tc))
        .map_err(|e| match e {
            TrainError::InvalidConfig(errs) => CliError::Validation(errs),
            other => rt(other),
        })?;

    checkpoint::save_to(&model, &run.path("model.ckpt")).map_err(rt)?;
    run.write_csv("surface.csv", |w| surface.dump_csv(w))?;
    run.write_csv("train_log.csv", |w| dump_train_log(&log_rows, w))?;

    // Time-zero estimates from the surface's own stopping times, evaluated
    // on the training paths (regenerated from the recorded seed).
    let (price, delta) = run.stage("estimates", || -> Result<_, CliError> {
        let paths = build_paths(&mp, tc.n_steps, tc.members * tc.paths_per_member, cfg.seed)?;
        let tau: Vec<usize> = hedging::stopping_times(&surface, paths.dt)
            .into_iter()
            .map(|(_, n)| n)
            .collect();
        let price = hedging::initial_price(&paths, &tau, mp.r, &payoff);
        let delta = hedging::initial_delta(&paths, &tau, &mp, &payoff);
        Ok((price, delta))
    })?;

    let y0 = surface.y_at(0)[0];
    let mut results = Results::new("train");
    results.prices = Some(PriceBlock {
        estimate: price.0,
        se: Some(price.1),
        reference: None,
    });
    results.deltas = Some(DeltaBlock {
        estimate: delta.0,
        se: Some(delta.1),
        reference: None,
    });
    results.details = Some(json!({
        "value_net_t0": y0,
        "checkpoint": "model.ckpt",
        "surface": "surface.csv",
        "train_log": "train_log.csv",
        "members": tc.members,
        "paths_per_member": tc.paths_per_member,
    }));
    run.finish(results)
}

/// Stopping times induced by the trained model on fresh paths: exercise the
/// first time the continuation estimate drops to the exercise value.
fn model_stopping_times(model: &EnsembleModel, paths: &PathCube) -> Result<Vec<usize>, CliError> {
    hedging::model_stopping_indices(model, paths).map_err(rt)
}

pub fn cmd_price(
    cfg: &RunConfig,
    checkpoint_path: Option<PathBuf>,
    n_paths: usize,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let ckpt = checkpoint_path.unwrap_or_else(|| default_checkpoint(cfg));
    let model = load_model(&ckpt)?;
    let mp = model.market.clone();
    let payoff = model.payoff;
    let seed = seed.unwrap_or_else(|| cfg.seed.wrapping_add(1));
    let mut run = RunDir::create(cfg, "price")?;
    let paths = run.stage("simulate", || {
        build_paths(&mp, model.n_steps, n_paths, seed)
    })?;
    let tau = run.stage("stopping_times", || model_stopping_times(&model, &paths))?;
    let (price, price_se) = hedging::initial_price(&paths, &tau, mp.r, &payoff);
    let (delta, delta_se) = hedging::initial_delta(&paths, &tau, &mp, &payoff);
    let exercised_early = tau.iter().filter(|&&n| n < model.n_steps).count();

    let mut results = Results::new("price");
    results.prices = Some(PriceBlock {
        estimate: price,
        se: Some(price_se),
        reference: None,
    });
    results.deltas = Some(DeltaBlock {
        estimate: delta,
        se: Some(delta_se),
        reference: None,
    });
    results.details = Some(json!({
        "checkpoint": ckpt.display().to_string(),
        "n_paths": n_paths,
        "eval_seed": seed,
        "fraction_exercised_early": exercised_early as f64 / paths.n_paths as f64,
    }));
    run.finish(results)
}

pub fn cmd_lsm(cfg: &RunConfig) -> Result<(), CliError> {
    let mp = cfg.market_params();
    let payoff = cfg.payoff_spec().expect("validated");
    let n_paths = cfg.lsm_paths();
    let limit = cfg.lsm.memory_limit_floats as u128;
    let mut run = RunDir::create(cfg, "lsm")?;
    let paths = run.stage("simulate", || {
        build_paths(&mp, cfg.train.n_steps, n_paths, cfg.seed)
    })?;
    let fit = run
        .stage("lsm_fit", || {
            lsm::lsm_fit(&paths, &mp, &payoff, cfg.lsm.chi, limit)
        })
        .map_err(rt)?;

    let basis = lsm::basis_count(mp.d, cfg.lsm.chi);
    let predicted = lsm::predicted_memory_floats(mp.d, cfg.lsm.chi, cfg.train.n_steps, n_paths);
    let mut results = Results::new("lsm");
    results.prices = Some(PriceBlock {
        estimate: fit.price0,
        se: Some(fit.price0_se),
        reference: None,
    });
    results.deltas = Some(DeltaBlock {
        estimate: fit.delta0,
        se: Some(fit.delta0_se),
        reference: None,
    });
    results.memory = Some(MemoryBlock {
        nn_floats: nn_memory_floats(cfg).into(),
        lsm_floats: predicted.into(),
        lsm_basis_functions: basis.into(),
        lsm_memory_limit_floats: cfg.lsm.memory_limit_floats,
        lsm_refused: false,
    });
    results.details = Some(json!({
        "chi": cfg.lsm.chi,
        "n_paths": n_paths,
        "n_basis": basis.to_string(),
        "rank_deficient_steps": fit.rank_deficient_steps,
    }));
    run.finish(results)
}

pub fn cmd_fd(cfg: &RunConfig) -> Result<(), CliError> {
    let mp = cfg.market_params();
    let mut run = RunDir::create(cfg, "fd")?;
    let grid = run.stage("fd_solve", || solve_reduced_grid(cfg, &mp))?;
    let red = reduce_geometric(&mp).expect("checked by solve_reduced_grid");

    run.write_csv("fd_t0.csv", |w| {
        crate::artifacts::write_rows(
            w,
            "s,value,dv",
            grid.s_nodes
                .iter()
                .zip(grid.slice(0).iter().zip(&grid.dv[..grid.nodes()]))
                .map(|(&s, (&v, &dv))| vec![s, v, dv]),
        )
    })?;

    let (v0, dv0, clamped) = grid.interp_price_delta(red.s0, 0.0);
    if clamped {
        return Err(CliError::runtime(format!(
            "initial reduced price {} falls outside the grid span",
            red.s0
        )));
    }
    // Spread the reduced derivative across assets by the chain rule.
    let s_red = geometric_mean(&mp.s0);
    let delta: Vec<f64> = mp.s0.iter().map(|&si| dv0 * s_red / (mp.d as f64 * si)).collect();

    let mut results = Results::new("fd");
    results.prices = Some(PriceBlock {
        estimate: v0,
        se: None,
        reference: None,
    });
    results.deltas = Some(DeltaBlock {
        estimate: delta,
        se: None,
        reference: None,
    });
    results.details = Some(json!({
        "nodes": cfg.oracle.nodes,
        "steps": cfg.oracle.steps,
        "sigma_reduced": red.sigma,
        "drift_reduced": red.drift,
        "s0_reduced": red.s0,
        "dv_reduced_t0": dv0,
        "file": "fd_t0.csv",
    }));
    run.finish(results)
}

pub enum HedgeProviderKind {
    Model,
    Fd,
}

pub fn cmd_hedge(
    cfg: &RunConfig,
    provider_kind: HedgeProviderKind,
    checkpoint_path: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let seed = seed.unwrap_or(cfg.seed);
    let intervals = cfg.hedge.intervals;
    let mut run = RunDir::create(cfg, "hedge")?;

    // Both arms own their provider backing store; paths always come from
    // the market the provider was built for.
    let (report, provider_name) = match provider_kind {
        HedgeProviderKind::Model => {
            let ckpt = checkpoint_path.unwrap_or_else(|| default_checkpoint(cfg));
            let model = load_model(&ckpt)?;
            let mp = model.market.clone();
            let payoff = model.payoff;
            let paths = run.stage("simulate", || {
                build_paths(&mp, model.n_steps, cfg.hedge.n_paths, seed)
            })?;
            let provider = ModelProvider { model: &model };
            let report = run
                .stage("hedge", || {
                    hedging::hedge_simulate(&provider, &paths, &mp, &payoff, intervals)
                })
                .map_err(rt)?;
            (report, format!("model:{}", ckpt.display()))
        }
        HedgeProviderKind::Fd => {
            let mp = cfg.market_params();
            let payoff = cfg.payoff_spec().expect("validated");
            let grid = run.stage("fd_solve", || solve_reduced_grid(cfg, &mp))?;
            let paths = run.stage("simulate", || {
                build_paths(&mp, cfg.train.n_steps, cfg.hedge.n_paths, seed)
            })?;
            let provider = ReducedFdProvider { grid: &grid };
            let report = run
                .stage("hedge", || {
                    hedging::hedge_simulate(&provider, &paths, &mp, &payoff, intervals)
                })
                .map_err(rt)?;
            (report, "fd".to_string())
        }
    };

    run.write_csv("hedge_histogram.csv", |w| report.write_histogram_csv(w))?;
    run.write_csv("hedge_pnl.csv", |w| {
        crate::artifacts::write_rows(
            w,
            "relative_pnl",
            report.relative_pnl.iter().map(|&x| vec![x]),
        )
    })?;

    let mut results = Results::new("hedge");
    results.hedge = Some(HedgeBlock {
        intervals,
        n_paths: report.relative_pnl.len(),
        mean: report.mean,
        std: report.std,
    });
    results.details = Some(json!({
        "provider": provider_name,
        "seed": seed,
        "histogram": "hedge_histogram.csv",
        "pnl": "hedge_pnl.csv",
    }));
    run.finish(results)
}

/// Evaluates the trained model over fresh paths into a value surface (one
/// value/gradient/exercise row per timestep) for comparison against the
/// reduced reference solution.
fn evaluate_surface(model: &EnsembleModel, paths: &PathCube) -> Result<ValueSurface, CliError> {
    let d = model.market.d;
    let n_steps = paths.n_steps;
    let m_total = paths.n_paths;
    let rows = n_steps + 1;
    let mut y = vec![0.0; rows * m_total];
    let mut z = vec![0.0; rows * m_total * d];
    let mut exercised = vec![false; rows * m_total];
    let mut v = vec![0.0; rows * m_total];
    for n in 0..rows {
        let states = paths.states_at(n);
        let (yn, zn) = model.value_and_delta(n, states).map_err(rt)?;
        for m in 0..m_total {
            let f = model.payoff.intrinsic(&states[m * d..(m + 1) * d]);
            let idx = n * m_total + m;
            y[idx] = yn[m];
            exercised[idx] = yn[m] <= f;
            v[idx] = yn[m].max(f);
        }
        z[n * m_total * d..(n + 1) * m_total * d].copy_from_slice(&zn);
    }
    Ok(ValueSurface {
        n_steps,
        n_paths: m_total,
        d,
        y,
        z,
        exercised,
        v,
    })
}

pub fn cmd_compare(
    cfg: &RunConfig,
    checkpoint_path: Option<PathBuf>,
    n_paths: usize,
    seed: Option<u64>,
    reference_price: Option<f64>,
) -> Result<(), CliError> {
    let ckpt = checkpoint_path.unwrap_or_else(|| default_checkpoint(cfg));
    let model = load_model(&ckpt)?;
    let mp = model.market.clone();
    let seed = seed.unwrap_or_else(|| cfg.seed.wrapping_add(1));
    let mut run = RunDir::create(cfg, "compare")?;

    let paths = run.stage("simulate", || {
        build_paths(&mp, model.n_steps, n_paths, seed)
    })?;
    let surface = run.stage("evaluate", || evaluate_surface(&model, &paths))?;

    let model_price = surface.v_at(0)[0];
    // Time-zero delta via the pathwise stopping-time estimator (the same
    // one `price` reports): the net's own spatial gradient at the first
    // timestep is unreliable because every path starts at the single spot
    // s⁰, so that batch pins the value but barely constrains the slope.
    let model_delta = {
        let tau = hedging::stopping_times(&surface, paths.dt);
        let tau_idx: Vec<usize> = tau.iter().map(|&(_, n)| n).collect();
        hedging::initial_delta(&paths, &tau_idx, &mp, &model.payoff).0
    };

    let mut errors = ErrorBlock::default();
    let mut f1 = None;
    let mut price_reference = reference_price;
    let mut delta_reference = None;
    let mut details = serde_json::Map::new();
    details.insert("checkpoint".into(), json!(ckpt.display().to_string()));
    details.insert("n_paths".into(), json!(n_paths));
    details.insert("eval_seed".into(), json!(seed));

    let reducible = mp.d == 1 || matches!(model.payoff, PayoffSpec::GeometricCall { .. });
    if reducible {
        let grid = run.stage("fd_solve", || solve_reduced_grid(cfg, &mp))?;
        let red = reduce_geometric(&mp).expect("reducible");
        let (v_exact, dv_exact, _) = grid.interp_price_delta(red.s0, 0.0);
        let s_red = geometric_mean(&mp.s0);
        let delta_exact: Vec<f64> = mp
            .s0
            .iter()
            .map(|&si| dv_exact * s_red / (mp.d as f64 * si))
            .collect();

        errors.price_pct = Some(metrics::percent_error_point(model_price, v_exact).map_err(rt)?);
        errors.delta_pct =
            Some(metrics::percent_error_delta(&model_delta, &delta_exact).map_err(rt)?);
        errors.spacetime = Some(
            run.stage("spacetime", || {
                metrics::spacetime_errors(&surface, &paths, &mp, &grid)
            })
            .map_err(rt)?,
        );

        // Exercise-region agreement over every interior spacetime sample.
        let (pred, exact) = run.stage("boundary", || {
            let m_total = paths.n_paths;
            let mut pred = Vec::with_capacity(paths.n_steps * m_total);
            let mut exact = Vec::with_capacity(paths.n_steps * m_total);
            for n in 0..paths.n_steps {
                let t = paths.time(n);
                let states = paths.states_at(n);
                for m in 0..m_total {
                    pred.push(surface.exercised_at(n)[m]);
                    exact.push(grid.exercised_at(
                        geometric_mean(&states[m * mp.d..(m + 1) * mp.d]),
                        t,
                    ));
                }
            }
            (pred, exact)
        });
        match metrics::boundary_f1(&pred, &exact) {
            Ok(score) => f1 = Some(score),
            Err(MetricsError::UndefinedF1) => {
                details.insert(
                    "f1_note".into(),
                    json!("no exercised states in either classification; f1 undefined"),
                );
            }
            Err(e) => return Err(rt(e)),
        }

        if price_reference.is_none() {
            price_reference = Some(v_exact);
        }
        delta_reference = Some(delta_exact);
    } else if let Some(reference) = reference_price {
        errors.price_pct =
            Some(metrics::percent_error_point(model_price, reference).map_err(rt)?);
        details.insert(
            "reference_note".into(),
            json!("market does not reduce to one dimension; compared against the supplied reference price only"),
        );
    } else {
        return Err(CliError::Validation(vec![format!(
            "compare: payoff {:?} with d = {} has no one-dimensional reference; pass --reference-price",
            cfg.payoff.kind, mp.d
        )]));
    }

    let mut results = Results::new("compare");
    results.prices = Some(PriceBlock {
        estimate: model_price,
        se: None,
        reference: price_reference,
    });
    results.deltas = Some(DeltaBlock {
        estimate: model_delta,
        se: None,
        reference: delta_reference,
    });
    results.errors = Some(errors);
    results.f1 = f1;
    results.details = Some(serde_json::Value::Object(details));
    run.finish(results)
}

/// Total floats held by the network pipeline: the path cube plus the
/// per-sample value/gradient work buffers of the active timestep.
fn nn_memory_floats(cfg: &RunConfig) -> u128 {
    let n = cfg.train.n_steps as u128;
    let cm = (cfg.train.members * cfg.train.paths_per_member) as u128;
    let d = cfg.market.d as u128;
    n * cm * d + 2 * (cm + cm * d)
}

pub fn cmd_cost(cfg: &RunConfig, measure: bool) -> Result<(), CliError> {
    let mut run = RunDir::create(cfg, "cost")?;
    let d = cfg.market.d;
    let n = cfg.train.n_steps as f64;
    let j = cfg.train.j_anchor as f64;
    let cm = (cfg.train.members * cfg.train.paths_per_member) as f64;
    let layers = cfg.train.hidden_layers as f64;
    let width = if cfg.train.width > 0 { cfg.train.width } else { d + 5 } as f64;
    let m_lsm = cfg.lsm_paths();

    let basis = lsm::basis_count(d, cfg.lsm.chi);
    let lsm_floats = lsm::predicted_memory_floats(d, cfg.lsm.chi, cfg.train.n_steps, m_lsm);
    let refused = lsm_floats > cfg.lsm.memory_limit_floats as u128;

    // Relative work: stage one retrains the whole suffix stack every J-th
    // timestep (N/(2J)·N chained evaluations on average); stage two visits
    // each timestep once.  Per-sample cost scales with L·width².
    let per_sample = layers * width * width;
    let stage1_units = n * n / (2.0 * j) * cm * per_sample;
    let stage2_units = n * cm * per_sample;
    let lsm_units = n * m_lsm as f64 * (basis as f64) * (basis as f64);

    let mut details = serde_json::Map::new();
    details.insert(
        "time_model_units".into(),
        json!({
            "nn_stage1": stage1_units,
            "nn_stage2": stage2_units,
            "nn_total": stage1_units + stage2_units,
            "lsm_regression": lsm_units,
        }),
    );

    if measure {
        let dims = [2usize, 4, 8, 16];
        let mut seconds = Vec::with_capacity(dims.len());
        for &dim in &dims {
            let mp = MarketParams::symmetric(dim, 0.0, 0.02, 0.25, 0.75, 2.0, 100.0, 100.0);
            let payoff = PayoffSpec::GeometricCall { strike: 100.0 };
            let mut tc = TrainConfig::defaults(dim, 10, 2000, cfg.seed);
            tc.members = 1;
            tc.steps = 60;
            tc.batch = 128;
            let t0 = std::time::Instant::now();
            run.stage(&format!("measure_d{dim}"), || backward_sweep(&mp, &payoff, &tc))
                .map_err(rt)?;
            seconds.push(t0.elapsed().as_secs_f64());
        }
        let dims_f: Vec<f64> = dims.iter().map(|&x| x as f64).collect();
        let (coeffs, r2) = metrics::polynomial_fit_r2(&dims_f, &seconds, 2);
        details.insert(
            "measured".into(),
            json!({
                "dims": dims,
                "seconds": seconds,
                "quadratic_coefficients": coeffs,
                "quadratic_r2": r2,
            }),
        );
    }

    let mut results = Results::new("cost");
    results.memory = Some(MemoryBlock {
        nn_floats: nn_memory_floats(cfg).into(),
        lsm_floats: lsm_floats.into(),
        lsm_basis_functions: BigCount::from(basis),
        lsm_memory_limit_floats: cfg.lsm.memory_limit_floats,
        lsm_refused: refused,
    });
    results.details = Some(serde_json::Value::Object(details));
    run.finish(results)
}
