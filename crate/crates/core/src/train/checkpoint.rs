//! Single-file checkpoint container.
//!
//! Layout: the 8 magic bytes `MASKCKPT`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then raw little-endian `f32` blocks whose
//! byte offsets (relative to the end of the header) are listed in it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::model::FrameShape;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

use super::adamw::AdamW;
use super::config::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MASKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Headers beyond this size are rejected before parsing.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub kind: BlockKind,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
}

/// Seeds and counters from which every random draw of the run is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub noise_seed: u64,
    pub shuffle_seed: u64,
    /// Training steps already taken; noise streams are indexed by step.
    pub next_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: u64,
    step: u64,
    config_hash: String,
    config: TrainConfig,
    frame: FrameShape,
    stats: Vec<ChannelStats>,
    generator_step: u64,
    critic_step: u64,
    rng: RngSnapshot,
    blocks: Vec<BlockEntry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: u64,
    /// Completed training steps.
    pub step: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub frame: FrameShape,
    /// Training-set channel statistics, so samples can be mapped back to
    /// physical units.
    pub stats: Vec<ChannelStats>,
    pub generator_step: u64,
    pub critic_step: u64,
    pub rng: RngSnapshot,
    /// `(name, kind, tensor)` in store order.
    pub blocks: Vec<(String, BlockKind, Tensor)>,
}

impl Checkpoint {
    /// Snapshot of a store and its optimizer.
    pub fn capture(
        epoch: u64,
        step: u64,
        config: &TrainConfig,
        frame: FrameShape,
        stats: &[ChannelStats],
        store: &ParamStore,
        opt: &AdamW,
    ) -> Self {
        let mut blocks = Vec::new();
        for (_, p) in store.params() {
            blocks.push((p.name.clone(), BlockKind::Param, p.value.clone()));
        }
        for b in store.buffers() {
            blocks.push((b.name.clone(), BlockKind::Buffer, b.value.clone()));
        }
        for ((_, p), (m, v)) in store.params().zip(opt.m.iter().zip(&opt.v)) {
            blocks.push((p.name.clone(), BlockKind::AdamM, m.clone()));
            blocks.push((p.name.clone(), BlockKind::AdamV, v.clone()));
        }
        Checkpoint {
            epoch,
            step,
            config_hash: config.hash(),
            config: config.clone(),
            frame,
            stats: stats.to_vec(),
            generator_step: opt.generator_step,
            critic_step: opt.critic_step,
            rng: RngSnapshot {
                noise_seed: config.seeds.noise,
                shuffle_seed: config.seeds.shuffle,
                next_step: step,
            },
            blocks,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.blocks.len());
        let mut offset = 0u64;
        for (name, kind, t) in &self.blocks {
            entries.push(BlockEntry {
                name: name.clone(),
                kind: *kind,
                shape: t.shape().to_vec(),
                offset,
                len: t.len() as u64,
            });
            offset += 4 * t.len() as u64;
        }
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            step: self.step,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            frame: self.frame,
            stats: self.stats.clone(),
            generator_step: self.generator_step,
            critic_step: self.critic_step,
            rng: self.rng,
            blocks: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in &self.blocks {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses and validates a container; `origin` names the source in errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::integrity(origin, reason);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || hlen > (bytes.len() - 16) as u64 {
            return Err(bad(format!("header length {hlen} exceeds the file")));
        }
        let hend = 16 + hlen as usize;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header.format_version)));
        }
        if header.stats.len() != header.frame.channels {
            return Err(bad(format!(
                "{} channel statistics for {} channels",
                header.stats.len(),
                header.frame.channels
            )));
        }
        let data = &bytes[hend..];
        let mut blocks = Vec::with_capacity(header.blocks.len());
        let mut expected_offset = 0u64;
        for b in header.blocks {
            let count = b
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| bad(format!("{}: shape overflows", b.name)))?;
            if count != b.len || b.shape.contains(&0) {
                return Err(bad(format!("{}: shape {:?} does not hold {} values", b.name, b.shape, b.len)));
            }
            if b.offset != expected_offset {
                return Err(bad(format!("{}: block at offset {} expected {expected_offset}", b.name, b.offset)));
            }
            let end = b
                .len
                .checked_mul(4)
                .and_then(|n| n.checked_add(b.offset))
                .filter(|&e| e <= data.len() as u64)
                .ok_or_else(|| bad(format!("{}: block runs past the end of the file", b.name)))?;
            let raw = &data[b.offset as usize..end as usize];
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{}: non-finite values", b.name)));
            }
            expected_offset = end;
            let t = Tensor::new(b.shape, values).map_err(|e| bad(e.to_string()))?;
            blocks.push((b.name, b.kind, t));
        }
        if expected_offset != data.len() as u64 {
            return Err(bad(format!("{} trailing bytes", data.len() as u64 - expected_offset)));
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            step: header.step,
            config_hash: header.config_hash,
            config: header.config,
            frame: header.frame,
            stats: header.stats,
            generator_step: header.generator_step,
            critic_step: header.critic_step,
            rng: header.rng,
            blocks,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    fn find(&self, name: &str, kind: BlockKind) -> Option<&Tensor> {
        self.blocks
            .iter()
            .find(|(n, k, _)| n == name && *k == kind)
            .map(|(_, _, t)| t)
    }

    /// Copies parameters and buffers into `store`, which must have been
    /// built from the same model spec.
    pub fn restore_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.param_mut(id);
            let t = self
                .find(&p.name, BlockKind::Param)
                .ok_or_else(|| Error::config(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::config(format!(
                    "checkpoint shape {:?} for {} differs from model shape {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        let param_count = store.params().count();
        let stored_params = self.blocks.iter().filter(|b| b.1 == BlockKind::Param).count();
        if stored_params != param_count {
            return Err(Error::config(format!(
                "checkpoint holds {stored_params} parameters, model has {param_count}"
            )));
        }
        for b in store.buffers_mut() {
            let t = self
                .find(&b.name, BlockKind::Buffer)
                .ok_or_else(|| Error::config(format!("checkpoint lacks buffer {}", b.name)))?;
            if t.shape() != b.value.shape() {
                return Err(Error::config(format!("checkpoint buffer {} has the wrong shape", b.name)));
            }
            b.value = t.clone();
        }
        Ok(())
    }

    /// Restores parameters plus optimizer moments and counters.
    pub fn restore(&self, store: &mut ParamStore, opt: &mut AdamW) -> Result<()> {
        self.restore_params(store)?;
        let names: Vec<String> = store.params().map(|(_, p)| p.name.clone()).collect();
        for (k, name) in names.iter().enumerate() {
            let m = self.find(name, BlockKind::AdamM);
            let v = self.find(name, BlockKind::AdamV);
            match (m, v) {
                (Some(m), Some(v)) if m.shape() == opt.m[k].shape() && v.shape() == opt.v[k].shape() => {
                    opt.m[k] = m.clone();
                    opt.v[k] = v.clone();
                }
                _ => return Err(Error::config(format!("checkpoint lacks optimizer state for {name}"))),
            }
        }
        opt.generator_step = self.generator_step;
        opt.critic_step = self.critic_step;
        Ok(())
    }
}
