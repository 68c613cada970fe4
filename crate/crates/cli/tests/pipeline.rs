//! End-to-end runs of the `bsdenet` binary: the full command chain on a
//! small one-asset problem, the reference solve on the default config, the
//! exit-code contract, and run-to-run reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bsdenet"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn results(dir: &Path) -> serde_json::Value {
    let text = fs::read_to_string(dir.join("results.json")).expect("results.json exists");
    serde_json::from_str(&text).expect("results.json parses")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        r#"
seed = 11
output_dir = {:?}

[market]
d = 1
r = 0.05
delta = 0.02
sigma = 0.25
maturity = 0.5

[train]
n_steps = 8
j_anchor = 4
members = 1
paths_per_member = 4000
steps = 150
batch = 256
hidden_layers = 2
width = 6

[oracle]
nodes = 513
steps = 100

[lsm]
chi = 3
n_paths = 4000

[hedge]
intervals = 4
n_paths = 1000
"#,
        dir.join("out").display()
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn default_config_reference_solve_hits_known_price() {
    let tmp = tempdir("fd_default");
    // No config file: pure built-in defaults (7 assets, strike 100).
    run_ok(&["--output", tmp.to_str().unwrap(), "fd"]);
    let r = results(&tmp);
    let price = r["prices"]["estimate"].as_f64().unwrap();
    assert!(
        (price - 10.2591).abs() < 5e-3,
        "reduced reference price {price} drifted from 10.2591"
    );
    // The t=0 slice contains the initial reduced state as an exact node.
    let slice = fs::read_to_string(tmp.join("fd_t0.csv")).unwrap();
    let row = slice
        .lines()
        .find(|l| l.starts_with("100,"))
        .expect("s=100 row present");
    let v: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
    assert!((v - price).abs() < 1e-9, "node row {v} vs interpolated {price}");
    // Manifest pins the reproducibility inputs.
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.join("manifest.json")).unwrap()).unwrap();
    for key in ["config_sha256", "seed", "versions", "wall_s", "threads"] {
        assert!(!manifest[key].is_null(), "manifest missing {key}");
    }
}

#[test]
fn full_pipeline_on_one_asset_problem() {
    let tmp = tempdir("pipeline");
    let cfg = tiny_config(&tmp);
    let cfg = cfg.to_str().unwrap();
    let out = tmp.join("out");

    run_ok(&["--config", cfg, "train"]);
    for name in ["model.ckpt", "surface.csv", "train_log.csv", "config.toml"] {
        assert!(out.join(name).exists(), "train must write {name}");
    }
    let train_price = results(&out)["prices"]["estimate"].as_f64().unwrap();

    run_ok(&["--config", cfg, "price", "--paths", "4000"]);
    let price = results(&out)["prices"]["estimate"].as_f64().unwrap();

    run_ok(&["--config", cfg, "fd"]);
    let fd_price = results(&out)["prices"]["estimate"].as_f64().unwrap();

    // A 0.2-second model still prices within ~10% of the reference, and
    // in-sample vs out-of-sample estimates agree to the same order.
    assert!(
        (price - fd_price).abs() / fd_price < 0.10,
        "model price {price} vs reference {fd_price}"
    );
    assert!(
        (train_price - fd_price).abs() / fd_price < 0.10,
        "training-path price {train_price} vs reference {fd_price}"
    );

    run_ok(&["--config", cfg, "lsm"]);
    let lsm_price = results(&out)["prices"]["estimate"].as_f64().unwrap();
    assert!(
        (lsm_price - fd_price).abs() / fd_price < 0.10,
        "regression price {lsm_price} vs reference {fd_price}"
    );

    run_ok(&["--config", cfg, "compare"]);
    let r = results(&out);
    assert!(r["errors"]["price_pct"].as_f64().unwrap() < 15.0);
    assert!(r["errors"]["spacetime"]["pct_price"].as_f64().unwrap() < 25.0);

    run_ok(&["--config", cfg, "hedge", "--provider", "fd"]);
    let r = results(&out);
    let mean = r["hedge"]["mean"].as_f64().unwrap();
    let std = r["hedge"]["std"].as_f64().unwrap();
    assert!(mean.abs() < 0.1, "hedge mean {mean}");
    assert!(std > 0.0 && std < 1.0, "hedge std {std}");
    assert!(out.join("hedge_histogram.csv").exists());

    run_ok(&["--config", cfg, "cost"]);
    let r = results(&out);
    assert_eq!(r["memory"]["lsm_basis_functions"]["exact"], "4");
    assert_eq!(r["memory"]["lsm_refused"], false);
}

#[test]
fn identical_runs_reproduce_identical_artifacts() {
    let tmp = tempdir("repro");
    let cfg = tiny_config(&tmp);
    let cfg = cfg.to_str().unwrap();
    let a = tmp.join("a");
    let b = tmp.join("b");
    run_ok(&["--config", cfg, "--output", a.to_str().unwrap(), "train"]);
    run_ok(&["--config", cfg, "--output", b.to_str().unwrap(), "train"]);
    assert_eq!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(b.join("model.ckpt")).unwrap(),
        "checkpoints must be bit-identical"
    );
    assert_eq!(
        fs::read_to_string(a.join("surface.csv")).unwrap(),
        fs::read_to_string(b.join("surface.csv")).unwrap(),
        "value surfaces must be bit-identical"
    );
    // The resolved config written next to the artifacts reproduces the run:
    // re-running from a's own config.toml rewrites a bit-identically.
    let ckpt_before = fs::read(a.join("model.ckpt")).unwrap();
    let hash_before = manifest_hash(&a);
    run_ok(&["--config", a.join("config.toml").to_str().unwrap(), "train"]);
    assert_eq!(ckpt_before, fs::read(a.join("model.ckpt")).unwrap());
    assert_eq!(hash_before, manifest_hash(&a));
}

fn manifest_hash(dir: &Path) -> String {
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["config_sha256"].as_str().unwrap().to_string()
}

#[test]
fn exit_codes_and_error_json_follow_the_contract() {
    let tmp = tempdir("errors");
    let bad = tmp.join("bad.toml");
    fs::write(&bad, "[market]\nd = 0\nrho = 3.0\n").unwrap();

    // Validation failure: exit 1 and one message per offending key.
    let out = bin()
        .args(["--config", bad.to_str().unwrap(), "--error-json", "train"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).expect("error JSON on stdout");
    assert_eq!(doc["kind"], "validation");
    let messages = doc["messages"].as_array().unwrap();
    assert!(messages.iter().any(|m| m.as_str().unwrap().contains("market.d")));
    assert!(messages.iter().any(|m| m.as_str().unwrap().contains("market.rho")));

    // Runtime failure: exit 2.
    let cfg = tiny_config(&tmp);
    let out = bin()
        .args([
            "--config",
            cfg.to_str().unwrap(),
            "price",
            "--checkpoint",
            tmp.join("missing.ckpt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Missing explicit config file: validation, not a crash.
    let out = bin()
        .args(["--config", tmp.join("absent.toml").to_str().unwrap(), "fd"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bsdenet_cli_{tag}_{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}
