//! Line-oriented checkpoint files.
//!
//! ```text
//! awp-lab-checkpoint 1
//! epoch <n>
//! rng <hex>:<hex>:<hex>:<hex>
//! config <key>=<value>          (zero or more)
//! tensor <name> <d0,d1,..> <base64 of little-endian f64 payload>
//! end
//! ```

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "awp-lab-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub version: u32,
    pub epoch: usize,
    pub rng_state: [u64; 4],
    /// Resolved configuration echoed at save time.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl CheckpointRecord {
    pub fn from_network(net: &Network, epoch: usize, rng_state: [u64; 4], config: Vec<(String, String)>) -> Self {
        CheckpointRecord {
            version: CHECKPOINT_VERSION,
            epoch,
            rng_state,
            config,
            tensors: net
                .named_params()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {}\n", self.version);
        out.push_str(&format!("epoch {}\n", self.epoch));
        let rng: Vec<String> = self.rng_state.iter().map(|s| format!("{s:016x}")).collect();
        out.push_str(&format!("rng {}\n", rng.join(":")));
        for (k, v) in &self.config {
            out.push_str(&format!("config {k}={v}\n"));
        }
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            out.push_str(&format!("tensor {name} {} {}\n", dims.join(","), STANDARD.encode(bytes)));
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::format(path, format!("record {line}: {msg}"));
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

        let (n, head) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        let version = match head.split_once(' ') {
            Some((CHECKPOINT_MAGIC, v)) => v
                .trim()
                .parse::<u32>()
                .map_err(|_| bad(n, format!("bad version {v:?}")))?,
            _ => return Err(bad(n, "not an awp-lab checkpoint".into())),
        };
        if version != CHECKPOINT_VERSION {
            return Err(bad(
                n,
                format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
            ));
        }

        let mut rec = CheckpointRecord {
            version,
            epoch: 0,
            rng_state: [0; 4],
            config: Vec::new(),
            tensors: Vec::new(),
        };
        let mut ended = false;
        for (n, line) in lines {
            if ended {
                if line.trim().is_empty() {
                    continue;
                }
                return Err(bad(n, "data after end marker".into()));
            }
            let (kind, rest) = line.split_once(' ').unwrap_or((line, ""));
            match kind {
                "epoch" => {
                    rec.epoch = rest.trim().parse().map_err(|_| bad(n, format!("bad epoch {rest:?}")))?;
                }
                "rng" => {
                    let parts: Vec<&str> = rest.trim().split(':').collect();
                    if parts.len() != 4 {
                        return Err(bad(n, "rng state needs 4 words".into()));
                    }
                    for (slot, p) in rec.rng_state.iter_mut().zip(parts) {
                        *slot = u64::from_str_radix(p, 16).map_err(|_| bad(n, format!("bad rng word {p:?}")))?;
                    }
                }
                "config" => {
                    let (k, v) = rest
                        .split_once('=')
                        .ok_or_else(|| bad(n, format!("config record without '=': {rest:?}")))?;
                    rec.config.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let mut f = rest.split(' ');
                    let (Some(name), Some(dims), Some(payload), None) = (f.next(), f.next(), f.next(), f.next()) else {
                        return Err(bad(n, "tensor record needs name, shape and payload".into()));
                    };
                    let shape = dims
                        .split(',')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad(n, format!("tensor {name}: bad shape {dims:?}")))?;
                    let bytes = STANDARD
                        .decode(payload)
                        .map_err(|e| bad(n, format!("tensor {name}: bad payload: {e}")))?;
                    if bytes.len() % 8 != 0 {
                        return Err(bad(n, format!("tensor {name}: payload is not whole f64s")));
                    }
                    let data: Vec<f64> = bytes
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    let t = Tensor::new(shape, data).map_err(|e| bad(n, format!("tensor {name}: {e}")))?;
                    rec.tensors.push((name.to_string(), t));
                }
                "end" => ended = true,
                other => return Err(bad(n, format!("unknown record kind {other:?}"))),
            }
        }
        if !ended {
            return Err(Error::format(path, "truncated checkpoint: missing end marker"));
        }
        Ok(rec)
    }

    /// Copy the stored tensors into a network of the same architecture.
    pub fn apply_to(&self, template: &Network) -> Result<Network> {
        let expected = template.named_params();
        if expected.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} tensors, architecture expects {}",
                self.tensors.len(),
                expected.len()
            )));
        }
        for ((en, et), (n, t)) in expected.iter().zip(&self.tensors) {
            if en != n {
                return Err(Error::Invalid(format!("checkpoint tensor {n:?} where architecture expects {en:?}")));
            }
            if et.shape() != t.shape() {
                return Err(Error::shape("checkpoint load", et.shape(), t.shape()));
            }
        }
        let mut net = template.clone();
        net.set_params(self.tensors.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(net)
    }
}

pub fn save_checkpoint(path: &Path, record: &CheckpointRecord) -> Result<()> {
    fs::write(path, record.to_text()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CheckpointRecord::parse(&text, path)
}

/// Read `path` and load it into a network shaped like `template`.
pub fn load_checkpoint(path: &Path, template: &Network) -> Result<(Network, CheckpointRecord)> {
    let rec = read_checkpoint(path)?;
    let net = rec.apply_to(template)?;
    Ok((net, rec))
}
