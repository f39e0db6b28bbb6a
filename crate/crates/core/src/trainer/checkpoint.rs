//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "HYPTAXCK"
//! header_len u64 LE    length of the JSON header in bytes
//! header     JSON      {format_version, config, epoch, step, rng, arrays}
//! payload    f64 LE    every array in header order, row-major
//! ```
//!
//! `arrays` lists `{name, rows, cols}`. Names are `param/<p>`,
//! `adam_m/<p>` and `adam_v/<p>`; the payload holds exactly
//! `sum(rows * cols)` values and nothing else.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ParamSet, TrainConfig};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYPTAXCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic header)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Position of the parameter-initialization generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
    pub params: ParamSet,
    pub adam_m: ParamSet,
    pub adam_v: ParamSet,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    epoch: u64,
    step: u64,
    rng: RngState,
    arrays: Vec<ArrayInfo>,
}

const GROUPS: [&str; 3] = ["param", "adam_m", "adam_v"];

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let sets = [&self.params, &self.adam_m, &self.adam_v];
        let mut arrays = Vec::new();
        for (group, set) in GROUPS.iter().zip(sets) {
            for (name, t) in set.iter() {
                arrays.push(ArrayInfo {
                    name: format!("{group}/{name}"),
                    rows: t.rows(),
                    cols: t.cols(),
                });
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng,
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for set in sets {
            for (_, t) in set.iter() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let corrupt = |m: &str| CheckpointError::Corrupt(m.to_string());
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .ok_or_else(|| corrupt("truncated header length"))?
            .try_into()
            .expect("8 bytes");
        let header_len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| corrupt("header length"))?;
        let header_end = 16usize
            .checked_add(header_len)
            .ok_or_else(|| corrupt("header length"))?;
        let json = bytes.get(16..header_end).ok_or_else(|| corrupt("truncated header"))?;
        let version: serde_json::Value = serde_json::from_slice(json).map_err(|e| corrupt(&e.to_string()))?;
        let found = version
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| corrupt("missing format_version"))?;
        if found != FORMAT_VERSION as u64 {
            return Err(CheckpointError::Version { found: found as u32 });
        }
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&e.to_string()))?;

        let mut payload = &bytes[header_end..];
        let mut sets: [Vec<(String, Tensor)>; 3] = Default::default();
        for info in header.arrays {
            let (group, name) = info
                .name
                .split_once('/')
                .ok_or_else(|| corrupt("array name without group"))?;
            let slot = GROUPS
                .iter()
                .position(|g| *g == group)
                .ok_or_else(|| corrupt("unknown array group"))?;
            let n = info.rows.checked_mul(info.cols).ok_or_else(|| corrupt("array shape"))?;
            let nbytes = n.checked_mul(8).ok_or_else(|| corrupt("array shape"))?;
            if payload.len() < nbytes {
                return Err(corrupt("truncated payload"));
            }
            let (chunk, rest) = payload.split_at(nbytes);
            payload = rest;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sets[slot].push((name.to_string(), Tensor::new(info.rows, info.cols, data)));
        }
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        let [params, adam_m, adam_v] = sets.map(ParamSet::new);
        let names = |s: &ParamSet| s.names().map(str::to_string).collect::<Vec<_>>();
        if names(&params) != names(&adam_m) || names(&params) != names(&adam_v) {
            return Err(corrupt("optimizer state does not match parameters"));
        }
        Ok(Checkpoint {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
            params,
            adam_m,
            adam_v,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
