//! Checkpoint files.
//!
//! ```text
//! "CKPT"                 4 bytes
//! version   u32 LE       currently 1
//! hdr_len   u64 LE
//! header    hdr_len bytes of UTF-8 JSON
//! payload   little-endian f64 blocks, in the order listed in `header.blocks`
//! ```
//!
//! Blocks are the tagger parameters (`weights`, `bias`, `transitions`,
//! `start`, `end`, then `projection.{i}`), followed for Adam by the first
//! and second moment of each parameter block (`adam.m.*`, `adam.v.*`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::LabelSet;
use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::model::{Projection, Tagger};
use crate::train::{OptimizerKind, OptimizerState, TrainConfig};

pub const CKPT_MAGIC: [u8; 4] = *b"CKPT";
pub const CKPT_VERSION: u32 = 1;

/// Position of the shuffling RNG (ChaCha8) so a resumed run continues the
/// exact same stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub dev_f1: f64,
    pub train_loss: f64,
    pub config: TrainConfig,
    pub tagger: Tagger,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    epoch: usize,
    dev_f1: f64,
    train_loss: f64,
    config_hash: String,
    config: TrainConfig,
    labels: Vec<String>,
    models: Vec<String>,
    input_dims: Vec<usize>,
    num_tags: usize,
    dim: usize,
    projections: Vec<(usize, usize)>,
    constrained: bool,
    adam_step: Option<u64>,
    rng_seed: String,
    rng_word_pos: String,
    blocks: Vec<BlockInfo>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("bad rng seed `{s}`"));
    if s.len() != 64 || !s.is_ascii() {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blocks: Vec<(String, &[f64])> = self.tagger.blocks();
        let adam_step = match &self.optimizer {
            OptimizerState::Sgd => None,
            OptimizerState::Adam { step, m, v } => {
                let names: Vec<String> = blocks.iter().map(|(n, _)| n.clone()).collect();
                if m.len() != names.len() || v.len() != names.len() {
                    return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
                }
                for (n, b) in names.iter().zip(m) {
                    blocks.push((format!("adam.m.{n}"), b));
                }
                for (n, b) in names.iter().zip(v) {
                    blocks.push((format!("adam.v.{n}"), b));
                }
                Some(*step)
            }
        };
        let header = Header {
            epoch: self.epoch,
            dev_f1: self.dev_f1,
            train_loss: self.train_loss,
            config_hash: self.config.trajectory_hash(),
            config: self.config.clone(),
            labels: self.tagger.labels.labels().to_vec(),
            models: self.tagger.models.clone(),
            input_dims: self.tagger.input_dims.clone(),
            num_tags: self.tagger.crf.num_tags(),
            dim: self.tagger.crf.dim(),
            projections: self.tagger.projections.iter().map(|p| (p.in_dim, p.out_dim)).collect(),
            constrained: self.tagger.constrained,
            adam_step,
            rng_seed: hex(&self.rng.seed),
            rng_word_pos: self.rng.word_pos.to_string(),
            blocks: blocks
                .iter()
                .map(|(name, b)| BlockInfo {
                    name: name.clone(),
                    len: b.len(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = blocks.iter().map(|(_, b)| b.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, b) in &blocks {
            for v in *b {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 {
            return Err(err("file too short"));
        }
        if bytes[..4] != CKPT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hdr_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let hdr_end = 16usize
            .checked_add(hdr_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..hdr_end])?;

        let mut payload = &bytes[hdr_end..];
        let mut blocks: Vec<(String, Vec<f64>)> = Vec::with_capacity(header.blocks.len());
        for info in &header.blocks {
            let n = info.len.checked_mul(8).ok_or_else(|| err("absurd block length"))?;
            if payload.len() < n {
                return Err(Error::Checkpoint(format!("block `{}` truncated", info.name)));
            }
            let (head, rest) = payload.split_at(n);
            blocks.push((
                info.name.clone(),
                head.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ));
            payload = rest;
        }
        if !payload.is_empty() {
            return Err(err("trailing bytes after last block"));
        }
        if header.config_hash != header.config.trajectory_hash() {
            return Err(err("config hash does not match stored config"));
        }

        let mut blocks = blocks.into_iter();
        let mut take = |name: &str| -> Result<Vec<f64>> {
            match blocks.next() {
                Some((n, b)) if n == name => Ok(b),
                Some((n, _)) => Err(Error::Checkpoint(format!("expected block `{name}`, found `{n}`"))),
                None => Err(Error::Checkpoint(format!("missing block `{name}`"))),
            }
        };
        let crf = CrfParams::from_parts(
            header.num_tags,
            header.dim,
            take("weights")?,
            take("bias")?,
            take("transitions")?,
            take("start")?,
            take("end")?,
        )?;
        let mut projections = Vec::with_capacity(header.projections.len());
        for (i, &(in_dim, out_dim)) in header.projections.iter().enumerate() {
            let weights = take(&format!("projection.{i}"))?;
            if weights.len() != in_dim * out_dim {
                return Err(Error::Checkpoint(format!("projection.{i} has wrong size")));
            }
            projections.push(Projection {
                in_dim,
                out_dim,
                weights,
            });
        }
        let labels = LabelSet::new(header.labels.clone())?;
        if labels.num_tags() != header.num_tags {
            return Err(err("label set does not match tag count"));
        }
        let tagger = Tagger {
            labels,
            models: header.models,
            input_dims: header.input_dims,
            crf,
            projections,
            constrained: header.constrained,
        };
        let names: Vec<String> = tagger.blocks().into_iter().map(|(n, _)| n).collect();
        let optimizer = match (header.config.optimizer, header.adam_step) {
            (OptimizerKind::Sgd, None) => OptimizerState::Sgd,
            (OptimizerKind::Adam, Some(step)) => {
                let m = names.iter().map(|n| take(&format!("adam.m.{n}"))).collect::<Result<Vec<_>>>()?;
                let v = names.iter().map(|n| take(&format!("adam.v.{n}"))).collect::<Result<Vec<_>>>()?;
                OptimizerState::Adam { step, m, v }
            }
            _ => return Err(err("optimizer state does not match configured optimizer")),
        };
        if blocks.next().is_some() {
            return Err(err("unexpected extra block"));
        }
        if !(0.0..=1.0).contains(&header.dev_f1) {
            return Err(err("dev_f1 outside [0, 1]"));
        }
        Ok(Self {
            epoch: header.epoch,
            dev_f1: header.dev_f1,
            train_loss: header.train_loss,
            config: header.config,
            tagger,
            optimizer,
            rng: RngState {
                seed: unhex32(&header.rng_seed)?,
                word_pos: header
                    .rng_word_pos
                    .parse()
                    .map_err(|_| err("bad rng word position"))?,
            },
        })
    }

    /// Writes through a temporary file and renames into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

pub fn checkpoint_file_name(epoch: usize) -> String {
    format!("checkpoint-epoch-{epoch:04}.ckpt")
}

/// Epoch encoded in a rotating checkpoint's file name.
pub fn parse_checkpoint_file_name(name: &str) -> Option<usize> {
    name.strip_prefix("checkpoint-epoch-")?.strip_suffix(".ckpt")?.parse().ok()
}

/// Rotating checkpoints in `dir`, sorted by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(epoch) = entry.file_name().to_str().and_then(parse_checkpoint_file_name) {
            out.push((epoch, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}
