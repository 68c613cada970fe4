//! Trained-model persistence (`.bsdenet` files): a versioned text manifest
//! followed by raw little-endian 64-bit-float blocks, one per net, holding
//! every trainable parameter and normalization statistic.  Round trips are
//! bit-exact.
//!
//! Layout:
//!
//! ```text
//! BSDENET 1
//! market {…one-line JSON…}
//! payoff {…one-line JSON…}
//! kappa <f64>  /  n_steps <int>  /  j_anchor <int>  /  seed <int>  /  members <C>
//! member <c> nets <count>
//! net <timestep> parent <p> eta <η> input_dim <i> width <w> hidden_layers <L> floats <F>
//! <F × 8 raw bytes>\n
//! …
//! ```
//!
//! Each net's block stores, in order: the flattened trainable parameters
//! (per layer w, γ, β; then γ⁰, β⁰, ω, b, α), then per hidden layer the
//! running mean and running variance, then the frozen input whitening μ⁰
//! and σ⁰.

use crate::market::{MarketParams, PayoffSpec};
use crate::netcore::{EnsembleModel, LayerStats, MemberNets, NetParams, NetShape, TimestepNet};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;
pub const FILE_EXTENSION: &str = "bsdenet";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("unsupported checkpoint version: expected {FORMAT_VERSION}, found {found}")]
    VersionMismatch { found: String },
    #[error("checkpoint truncated while reading {context}")]
    Truncated { context: String },
    #[error("checkpoint dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("malformed checkpoint {context}: {detail}")]
    Malformed { context: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn net_float_count(shape: NetShape) -> usize {
    let per_layer_params: usize = (0..shape.hidden_layers)
        .map(|l| shape.width * shape.fan_in(l) + 2 * shape.width)
        .sum();
    let params = per_layer_params + 2 * shape.input_dim + shape.width + 2;
    let running = 2 * shape.width * shape.hidden_layers;
    let whitening = 2 * shape.input_dim;
    params + running + whitening
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a trained model to bytes.
pub fn save(model: &EnsembleModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(format!("BSDENET {FORMAT_VERSION}\n").as_bytes());
    let market = serde_json::to_string(&model.market).expect("market params serialize");
    let payoff = serde_json::to_string(&model.payoff).expect("payoff serialize");
    out.extend_from_slice(format!("market {market}\n").as_bytes());
    out.extend_from_slice(format!("payoff {payoff}\n").as_bytes());
    out.extend_from_slice(format!("kappa {}\n", model.kappa).as_bytes());
    out.extend_from_slice(format!("n_steps {}\n", model.n_steps).as_bytes());
    out.extend_from_slice(format!("j_anchor {}\n", model.j_anchor).as_bytes());
    out.extend_from_slice(format!("seed {}\n", model.seed).as_bytes());
    out.extend_from_slice(format!("members {}\n", model.members.len()).as_bytes());
    for (c, member) in model.members.iter().enumerate() {
        out.extend_from_slice(format!("member {c} nets {}\n", member.nets.len()).as_bytes());
        for (&timestep, net) in &member.nets {
            let shape = net.shape;
            let floats = net_float_count(shape);
            out.extend_from_slice(
                format!(
                    "net {timestep} parent {} eta {} input_dim {} width {} hidden_layers {} floats {floats}\n",
                    net.parent_index, net.eta, shape.input_dim, shape.width, shape.hidden_layers
                )
                .as_bytes(),
            );
            let mut flat = vec![0.0; net.params.flat_len()];
            net.params.write_flat(&mut flat);
            push_f64s(&mut out, &flat);
            for st in &net.running {
                push_f64s(&mut out, &st.mu);
                push_f64s(&mut out, &st.var);
            }
            push_f64s(&mut out, &net.mu0);
            push_f64s(&mut out, &net.sd0);
            out.push(b'\n');
        }
    }
    out
}

/// Byte cursor with line- and block-structured reads.
struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self, context: &str) -> Result<&'a str, CheckpointError> {
        if self.pos >= self.data.len() {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
            });
        }
        let rest = &self.data[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Truncated {
                context: context.to_string(),
            })?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|e| CheckpointError::Malformed {
            context: context.to_string(),
            detail: e.to_string(),
        })
    }

    fn f64_block(&mut self, count: usize, context: &str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = count * 8 + 1; // trailing newline
        if self.pos + bytes > self.data.len() {
            return Err(CheckpointError::Truncated {
                context: context.to_string(),
            });
        }
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let start = self.pos + k * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&self.data[start..start + 8]);
            out.push(f64::from_le_bytes(buf));
        }
        self.pos += count * 8;
        if self.data[self.pos] != b'\n' {
            return Err(CheckpointError::Malformed {
                context: context.to_string(),
                detail: "missing block terminator".into(),
            });
        }
        self.pos += 1;
        Ok(out)
    }
}

fn field<'a>(line: &'a str, key: &str, context: &str) -> Result<&'a str, CheckpointError> {
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| CheckpointError::Malformed {
            context: context.to_string(),
            detail: format!("expected `{key} …`, found `{line}`"),
        })
}

fn parse<T: std::str::FromStr>(s: &str, context: &str) -> Result<T, CheckpointError>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| CheckpointError::Malformed {
        context: context.to_string(),
        detail: e.to_string(),
    })
}

/// Deserializes a model previously produced by [`save`].
pub fn load(data: &[u8]) -> Result<EnsembleModel, CheckpointError> {
    let mut cur = Cursor { data, pos: 0 };
    let magic = cur.line("header")?;
    match magic.strip_prefix("BSDENET ") {
        Some(v) if v == FORMAT_VERSION.to_string() => {}
        Some(v) => {
            return Err(CheckpointError::VersionMismatch {
                found: v.to_string(),
            })
        }
        None => {
            return Err(CheckpointError::VersionMismatch {
                found: magic.to_string(),
            })
        }
    }
    let market: MarketParams = serde_json::from_str(field(cur.line("market")?, "market", "market")?)
        .map_err(|e| CheckpointError::Malformed {
            context: "market".into(),
            detail: e.to_string(),
        })?;
    let payoff: PayoffSpec = serde_json::from_str(field(cur.line("payoff")?, "payoff", "payoff")?)
        .map_err(|e| CheckpointError::Malformed {
            context: "payoff".into(),
            detail: e.to_string(),
        })?;
    let kappa: f64 = parse(field(cur.line("kappa")?, "kappa", "kappa")?, "kappa")?;
    let n_steps: usize = parse(field(cur.line("n_steps")?, "n_steps", "n_steps")?, "n_steps")?;
    let j_anchor: usize = parse(
        field(cur.line("j_anchor")?, "j_anchor", "j_anchor")?,
        "j_anchor",
    )?;
    let seed: u64 = parse(field(cur.line("seed")?, "seed", "seed")?, "seed")?;
    let n_members: usize = parse(field(cur.line("members")?, "members", "members")?, "members")?;

    let mut members = Vec::with_capacity(n_members);
    for c in 0..n_members {
        let ctx = format!("member {c}");
        let line = cur.line(&ctx)?;
        let rest = field(line, "member", &ctx)?;
        let mut words = rest.split(' ');
        let idx: usize = parse(words.next().unwrap_or(""), &ctx)?;
        if idx != c {
            return Err(CheckpointError::Malformed {
                context: ctx.clone(),
                detail: format!("member index {idx} out of order"),
            });
        }
        if words.next() != Some("nets") {
            return Err(CheckpointError::Malformed {
                context: ctx.clone(),
                detail: "expected `nets <count>`".into(),
            });
        }
        let n_nets: usize = parse(words.next().unwrap_or(""), &ctx)?;
        let mut member = MemberNets::default();
        for _ in 0..n_nets {
            let net = load_net(&mut cur, &market, n_steps)?;
            member.nets.insert(net.timestep, net);
        }
        if member.nets.len() != n_nets {
            return Err(CheckpointError::DimensionMismatch(format!(
                "member {c}: duplicate net timesteps (expected {n_nets} distinct)"
            )));
        }
        members.push(member);
    }
    Ok(EnsembleModel {
        market,
        payoff,
        kappa,
        n_steps,
        j_anchor,
        seed,
        members,
    })
}

fn load_net(
    cur: &mut Cursor,
    market: &MarketParams,
    n_steps: usize,
) -> Result<TimestepNet, CheckpointError> {
    let line = cur.line("net header")?;
    let ctx = format!("net header `{line}`");
    let rest = field(line, "net", &ctx)?;
    let words: Vec<&str> = rest.split(' ').collect();
    if words.len() != 13
        || words[1] != "parent"
        || words[3] != "eta"
        || words[5] != "input_dim"
        || words[7] != "width"
        || words[9] != "hidden_layers"
        || words[11] != "floats"
    {
        return Err(CheckpointError::Malformed {
            context: ctx,
            detail: "expected `net <n> parent <p> eta <η> input_dim <i> width <w> hidden_layers <L> floats <F>`"
                .into(),
        });
    }
    let timestep: usize = parse(words[0], &ctx)?;
    let parent_index: usize = parse(words[2], &ctx)?;
    let eta: usize = parse(words[4], &ctx)?;
    let input_dim: usize = parse(words[6], &ctx)?;
    let width: usize = parse(words[8], &ctx)?;
    let hidden_layers: usize = parse(words[10], &ctx)?;
    let shape = NetShape {
        input_dim,
        width,
        hidden_layers,
    };
    if input_dim != market.d + 2 {
        return Err(CheckpointError::DimensionMismatch(format!(
            "net {timestep}: input_dim {input_dim} does not match market dimension {} + 2",
            market.d
        )));
    }
    if timestep >= n_steps || parent_index > n_steps || eta == 0 || parent_index != timestep + eta {
        return Err(CheckpointError::DimensionMismatch(format!(
            "net {timestep}: inconsistent recursion wiring (parent {parent_index}, eta {eta}, N {n_steps})"
        )));
    }
    let expected = net_float_count(shape);
    let declared: usize = parse(words[12], &ctx)?;
    if declared != expected {
        return Err(CheckpointError::DimensionMismatch(format!(
            "net {timestep}: declared {declared} floats but dims require {expected}"
        )));
    }
    let block = cur.f64_block(expected, &format!("net {timestep} data"))?;
    let mut params = NetParams::zeros(shape);
    let flat_len = params.flat_len();
    params.read_flat(&block[..flat_len]);
    let mut k = flat_len;
    let mut running = Vec::with_capacity(hidden_layers);
    for _ in 0..hidden_layers {
        let mu = block[k..k + width].to_vec();
        let var = block[k + width..k + 2 * width].to_vec();
        k += 2 * width;
        running.push(LayerStats { mu, var });
    }
    let mu0 = block[k..k + input_dim].to_vec();
    let sd0 = block[k + input_dim..k + 2 * input_dim].to_vec();
    Ok(TimestepNet {
        shape,
        params,
        running,
        mu0,
        sd0,
        timestep,
        parent_index,
        eta,
    })
}

/// Writes a model to a file (conventionally with the `.bsdenet` extension).
pub fn save_to(model: &EnsembleModel, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, save(model))?;
    Ok(())
}

/// Reads a model from a file produced by [`save_to`].
pub fn load_from(path: &Path) -> Result<EnsembleModel, CheckpointError> {
    let data = std::fs::read(path)?;
    load(&data)
}
