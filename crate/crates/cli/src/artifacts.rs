//! Run artifacts: every subcommand leaves behind the resolved config, a
//! manifest pinning everything needed to reproduce the run bit-for-bit
//! (config hash, seed, crate versions, thread count), and one results JSON
//! document with a shared shape so runs can be diffed across methods.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Serialize)]
struct Versions {
    core: &'static str,
    cli: &'static str,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    /// SHA-256 of the resolved config as written to `config.toml`.
    config_sha256: String,
    seed: u64,
    threads: usize,
    versions: Versions,
    started_unix_s: u64,
    wall_s: f64,
}

/// Point estimate with optional sampling error and reference value.
#[derive(Serialize, Default)]
pub struct PriceBlock {
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

#[derive(Serialize, Default)]
pub struct DeltaBlock {
    pub estimate: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<f64>>,
}

#[derive(Serialize, Default)]
pub struct ErrorBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spacetime: Option<bsdenet::metrics::SpacetimeErrors>,
}

#[derive(Serialize)]
pub struct HedgeBlock {
    pub intervals: usize,
    pub n_paths: usize,
    pub mean: f64,
    pub std: f64,
}

/// An exact integer quantity (floats of memory, basis functions) kept both
/// as a machine-precision string and as an approximate f64 for quick reads.
#[derive(Serialize)]
pub struct BigCount {
    pub exact: String,
    pub approx: f64,
}

impl From<u128> for BigCount {
    fn from(x: u128) -> Self {
        BigCount {
            exact: x.to_string(),
            approx: x as f64,
        }
    }
}

#[derive(Serialize)]
pub struct MemoryBlock {
    pub nn_floats: BigCount,
    pub lsm_floats: BigCount,
    pub lsm_basis_functions: BigCount,
    pub lsm_memory_limit_floats: u64,
    pub lsm_refused: bool,
}

#[derive(Serialize, Default)]
pub struct Results {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prices: Option<PriceBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deltas: Option<DeltaBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub errors: Option<ErrorBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hedge: Option<HedgeBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemoryBlock>,
    /// Free-form command-specific extras (counts, fits, file pointers).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
    /// Wall-clock seconds per named stage, plus "total".
    pub timings_s: std::collections::BTreeMap<String, f64>,
}

impl Results {
    pub fn new(command: &str) -> Self {
        Results {
            command: command.to_string(),
            ..Results::default()
        }
    }
}

/// Output directory of one run: creates the directory, stamps the start
/// time, and owns the artifact writers.
pub struct RunDir {
    pub dir: PathBuf,
    command: String,
    config_sha256: String,
    seed: u64,
    started: Instant,
    started_unix_s: u64,
    stage_marks: Vec<(String, f64)>,
}

impl RunDir {
    pub fn create(cfg: &RunConfig, command: &str) -> Result<Self, CliError> {
        let dir = PathBuf::from(&cfg.output_dir);
        fs::create_dir_all(&dir)
            .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let resolved = cfg.to_toml();
        let mut hasher = Sha256::new();
        hasher.update(resolved.as_bytes());
        let config_sha256 = format!("{:x}", hasher.finalize());
        fs::write(dir.join("config.toml"), &resolved)
            .map_err(|e| CliError::runtime(format!("cannot write config.toml: {e}")))?;
        Ok(RunDir {
            dir,
            command: command.to_string(),
            config_sha256,
            seed: cfg.seed,
            started: Instant::now(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            stage_marks: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records the wall time of a stage closure under `name`.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.stage_marks
            .push((name.to_string(), t0.elapsed().as_secs_f64()));
        out
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<(), CliError> {
        fs::write(self.path(name), text)
            .map_err(|e| CliError::runtime(format!("cannot write {name}: {e}")))
    }

    /// Streams a CSV writer callback into `name`.
    pub fn write_csv(
        &self,
        name: &str,
        f: impl FnOnce(&mut std::io::BufWriter<fs::File>) -> std::io::Result<()>,
    ) -> Result<(), CliError> {
        let file = fs::File::create(self.path(name))
            .map_err(|e| CliError::runtime(format!("cannot create {name}: {e}")))?;
        let mut buf = std::io::BufWriter::new(file);
        f(&mut buf).map_err(|e| CliError::runtime(format!("cannot write {name}: {e}")))?;
        buf.flush()
            .map_err(|e| CliError::runtime(format!("cannot flush {name}: {e}")))
    }

    /// Writes `results.json` and `manifest.json`, completing the run.
    pub fn finish(mut self, mut results: Results) -> Result<(), CliError> {
        let wall = self.started.elapsed().as_secs_f64();
        self.stage_marks.push(("total".into(), wall));
        for (name, secs) in &self.stage_marks {
            results.timings_s.insert(name.clone(), *secs);
        }
        let results_text = serde_json::to_string_pretty(&results)
            .map_err(|e| CliError::runtime(format!("results serialization failed: {e}")))?;
        self.write_text("results.json", &results_text)?;

        let threads = current_threads();
        let manifest = Manifest {
            command: &self.command,
            config_sha256: self.config_sha256.clone(),
            seed: self.seed,
            threads,
            versions: Versions {
                core: bsdenet::VERSION,
                cli: env!("CARGO_PKG_VERSION"),
            },
            started_unix_s: self.started_unix_s,
            wall_s: wall,
        };
        let manifest_text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| CliError::runtime(format!("manifest serialization failed: {e}")))?;
        self.write_text("manifest.json", &manifest_text)?;
        log::info!(
            "run complete: {} ({wall:.2}s, {} threads) → {}",
            self.command,
            threads,
            self.dir.display()
        );
        Ok(())
    }
}

#[cfg(feature = "parallel")]
fn current_threads() -> usize {
    rayon::current_num_threads()
}

#[cfg(not(feature = "parallel"))]
fn current_threads() -> usize {
    1
}

/// Renders an f64 table as CSV with a header row.
pub fn write_rows<W: Write>(
    w: &mut W,
    header: &str,
    rows: impl Iterator<Item = Vec<f64>>,
) -> std::io::Result<()> {
    writeln!(w, "{header}")?;
    for row in rows {
        let mut first = true;
        for x in row {
            if !first {
                write!(w, ",")?;
            }
            write!(w, "{x}")?;
            first = false;
        }
        writeln!(w)?;
    }
    Ok(())
}

