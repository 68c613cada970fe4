//! TOML run configuration: one file describes the market, the payoff, and
//! the settings of every pipeline stage, so a single config drives
//! `simulate`, `train`, `price`, `lsm`, `fd`, `hedge`, and `compare`
//! consistently.  Every field has a default tuned to the seven-asset
//! geometric-call reference experiment, so an empty file is a valid config.

use bsdenet::market::{MarketParams, PayoffSpec};
use bsdenet::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// A market field that is one number (shared across assets) or one value
/// per asset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerAsset {
    Shared(f64),
    Each(Vec<f64>),
}

impl PerAsset {
    /// Expands to a `d`-vector; a wrong-length vector is reported by
    /// [`RunConfig::validation_errors`], here it is truncated/padded with
    /// its last element so downstream code always sees `d` entries.
    pub fn expand(&self, d: usize) -> Vec<f64> {
        match self {
            PerAsset::Shared(x) => vec![*x; d],
            PerAsset::Each(v) => {
                let mut out = v.clone();
                let pad = *v.last().unwrap_or(&f64::NAN);
                out.resize(d, pad);
                out
            }
        }
    }

    fn len_mismatch(&self, d: usize) -> bool {
        matches!(self, PerAsset::Each(v) if v.len() != d)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketSection {
    pub d: usize,
    pub r: f64,
    pub delta: PerAsset,
    pub sigma: PerAsset,
    /// Pairwise correlation (one value for every distinct pair).
    pub rho: f64,
    pub maturity: f64,
    pub strike: f64,
    pub s0: PerAsset,
}

impl Default for MarketSection {
    fn default() -> Self {
        MarketSection {
            d: 7,
            r: 0.0,
            delta: PerAsset::Shared(0.02),
            sigma: PerAsset::Shared(0.25),
            rho: 0.75,
            maturity: 2.0,
            strike: 100.0,
            s0: PerAsset::Shared(100.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PayoffSection {
    /// `"geometric_call"` or `"max_call"`.
    pub kind: String,
}

impl Default for PayoffSection {
    fn default() -> Self {
        PayoffSection { kind: "geometric_call".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Timesteps N.
    pub n_steps: usize,
    /// Anchor stride J.
    pub j_anchor: usize,
    /// Blend θ between net values and discounted payoff chains in the
    /// regression targets.
    pub theta: f64,
    /// Ensemble size C.
    pub members: usize,
    /// Paths per ensemble member M.
    pub paths_per_member: usize,
    /// SGD steps per timestep.
    pub steps: usize,
    pub batch: usize,
    pub hidden_layers: usize,
    /// Hidden width; 0 means the default d+5.
    pub width: usize,
    pub clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            n_steps: 100,
            j_anchor: 4,
            theta: 0.5,
            members: 3,
            paths_per_member: 240_000,
            steps: 600,
            batch: 400,
            hidden_layers: 7,
            width: 0,
            clip_norm: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    /// Spatial nodes of the finite-difference grid.
    pub nodes: usize,
    /// Time steps of the finite-difference grid.
    pub steps: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection { nodes: 4097, steps: 1000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LsmSection {
    /// Total polynomial degree of the regression basis.
    pub chi: usize,
    /// Regression paths (0 means reuse members × paths_per_member).
    pub n_paths: usize,
    /// Refuse to run when the predicted working set exceeds this many
    /// f64 values.
    pub memory_limit_floats: u64,
}

impl Default for LsmSection {
    fn default() -> Self {
        LsmSection {
            chi: 4,
            n_paths: 0,
            memory_limit_floats: bsdenet::lsm::DEFAULT_MEMORY_LIMIT_FLOATS as u64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HedgeSection {
    /// Rebalancing intervals; must divide `train.n_steps`.
    pub intervals: usize,
    pub n_paths: usize,
}

impl Default for HedgeSection {
    fn default() -> Self {
        HedgeSection { intervals: 100, n_paths: 50_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub market: MarketSection,
    pub payoff: PayoffSection,
    pub train: TrainSection,
    pub oracle: OracleSection,
    pub lsm: LsmSection,
    pub hedge: HedgeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            output_dir: "out".into(),
            market: MarketSection::default(),
            payoff: PayoffSection::default(),
            train: TrainSection::default(),
            oracle: OracleSection::default(),
            lsm: LsmSection::default(),
            hedge: HedgeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn market_params(&self) -> MarketParams {
        let m = &self.market;
        let d = m.d;
        let mut rho = vec![m.rho; d * d];
        for i in 0..d {
            rho[i * d + i] = 1.0;
        }
        MarketParams {
            d,
            r: m.r,
            delta: m.delta.expand(d),
            sigma: m.sigma.expand(d),
            rho,
            maturity: m.maturity,
            strike: m.strike,
            s0: m.s0.expand(d),
        }
    }

    pub fn payoff_spec(&self) -> Option<PayoffSpec> {
        match self.payoff.kind.as_str() {
            "geometric_call" => Some(PayoffSpec::GeometricCall { strike: self.market.strike }),
            "max_call" => Some(PayoffSpec::MaxCall { strike: self.market.strike }),
            _ => None,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        let mut cfg = TrainConfig::defaults(self.market.d, t.n_steps, t.paths_per_member, self.seed);
        cfg.j_anchor = t.j_anchor;
        cfg.theta = t.theta;
        cfg.members = t.members;
        cfg.steps = t.steps;
        cfg.batch = t.batch;
        cfg.hidden_layers = t.hidden_layers;
        if t.width > 0 {
            cfg.width = t.width;
        }
        cfg.clip_norm = t.clip_norm;
        cfg
    }

    /// Total regression paths for the polynomial baseline.
    pub fn lsm_paths(&self) -> usize {
        if self.lsm.n_paths > 0 {
            self.lsm.n_paths
        } else {
            self.train.members * self.train.paths_per_member
        }
    }

    /// Every violated rule, one message per offending key, so a user can fix
    /// the whole file in one edit.  Empty means the config is runnable.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = self.market_params().validation_errors();
        let d = self.market.d;
        for (key, field) in [
            ("market.delta", &self.market.delta),
            ("market.sigma", &self.market.sigma),
            ("market.s0", &self.market.s0),
        ] {
            if field.len_mismatch(d) {
                errs.push(format!("{key}: expected 1 or {d} values"));
            }
        }
        if !(-1.0..=1.0).contains(&self.market.rho) {
            errs.push(format!("market.rho: must lie in [-1,1], got {}", self.market.rho));
        }
        if self.payoff_spec().is_none() {
            errs.push(format!(
                "payoff.kind: unknown kind {:?} (expected \"geometric_call\" or \"max_call\")",
                self.payoff.kind
            ));
        }
        errs.extend(self.train_config().validation_errors());
        if self.train.j_anchor == 0 {
            errs.push("train.j_anchor: must be at least 1".into());
        } else if self.train.j_anchor > self.train.n_steps {
            errs.push(format!(
                "train.j_anchor: stride {} exceeds n_steps {}",
                self.train.j_anchor, self.train.n_steps
            ));
        }
        if self.oracle.nodes < 3 {
            errs.push("oracle.nodes: grid needs at least 3 nodes".into());
        }
        if self.oracle.steps < 1 {
            errs.push("oracle.steps: must be at least 1".into());
        }
        if self.lsm.chi == 0 {
            errs.push("lsm.chi: must be at least 1".into());
        }
        if self.hedge.intervals == 0 {
            errs.push("hedge.intervals: must be at least 1".into());
        } else if self.train.n_steps % self.hedge.intervals != 0 {
            errs.push(format!(
                "hedge.intervals: {} does not divide train.n_steps {}",
                self.hedge.intervals, self.train.n_steps
            ));
        }
        if self.hedge.n_paths == 0 {
            errs.push("hedge.n_paths: must be at least 1".into());
        }
        errs
    }
}
