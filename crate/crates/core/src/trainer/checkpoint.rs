//! Binary checkpoint files.
//!
//! Layout: `ASCCKPT1`, u32 LE version, u64 LE header length, the JSON
//! header, every tensor as contiguous f64 LE in header order, then a CRC32
//! (u32 LE) of all preceding bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Checkpoint, EpochRecord, Result, TrainConfig, TrainError};
use crate::autograd::Tensor;
use crate::model::{param_layout, ModelConfig, Parameters, RunningStats};
use crate::util::write_atomic;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASCCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const PREFIX: usize = 8 + 4 + 8;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    history: Vec<EpochRecord>,
    best_val_loss: Option<f64>,
    best_epoch: Option<usize>,
    stale_epochs: usize,
    stopped_early: bool,
    adam_t: u64,
    /// The shuffle stream is re-derived from (seed, epoch), so these two
    /// values are its entire state.
    shuffle_seed: u64,
    tensors: Vec<TensorEntry>,
}

fn param_entries(prefix: &str, cfg: &ModelConfig, params: &Parameters) -> Result<Vec<TensorEntry>> {
    let mut out: Vec<TensorEntry> = param_layout(cfg)?
        .into_iter()
        .map(|s| TensorEntry { name: format!("{prefix}/{}", s.name), shape: s.shape })
        .collect();
    for (i, r) in params.running.iter().enumerate() {
        out.push(TensorEntry { name: format!("{prefix}/bn{i}.running_mean"), shape: vec![r.mean.len()] });
        out.push(TensorEntry { name: format!("{prefix}/bn{i}.running_var"), shape: vec![r.var.len()] });
    }
    Ok(out)
}

fn moment_entries(prefix: &str, cfg: &ModelConfig) -> Result<Vec<TensorEntry>> {
    Ok(param_layout(cfg)?
        .into_iter()
        .map(|s| TensorEntry { name: format!("{prefix}/{}", s.name), shape: s.shape })
        .collect())
}

fn entries(ckpt: &Checkpoint) -> Result<Vec<TensorEntry>> {
    let cfg = &ckpt.model_config;
    let mut out = param_entries("params", cfg, &ckpt.params)?;
    out.extend(param_entries("best", cfg, &ckpt.best_params)?);
    out.extend(moment_entries("adam_m", cfg)?);
    out.extend(moment_entries("adam_v", cfg)?);
    Ok(out)
}

fn push_params<'a>(out: &mut Vec<&'a [f64]>, p: &'a Parameters) {
    out.extend(p.tensors.iter().map(Tensor::data));
    for r in &p.running {
        out.push(&r.mean);
        out.push(&r.var);
    }
}

/// Serializes a checkpoint to bytes.
pub fn checkpoint_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    ckpt.params.validate(&ckpt.model_config)?;
    ckpt.best_params.validate(&ckpt.model_config)?;
    let header = Header {
        model_config: ckpt.model_config.clone(),
        train_config: ckpt.train_config.clone(),
        epoch: ckpt.epoch,
        history: ckpt.history.clone(),
        best_val_loss: ckpt.best_val_loss,
        best_epoch: ckpt.best_epoch,
        stale_epochs: ckpt.stale_epochs,
        stopped_early: ckpt.stopped_early,
        adam_t: ckpt.adam.t,
        shuffle_seed: ckpt.train_config.seed,
        tensors: entries(ckpt)?,
    };
    let json = serde_json::to_vec(&header).map_err(|e| TrainError::CorruptFile(e.to_string()))?;

    let mut blocks: Vec<&[f64]> = Vec::new();
    push_params(&mut blocks, &ckpt.params);
    push_params(&mut blocks, &ckpt.best_params);
    blocks.extend(ckpt.adam.m.iter().map(Tensor::data));
    blocks.extend(ckpt.adam.v.iter().map(Tensor::data));
    for (entry, block) in header.tensors.iter().zip(&blocks) {
        if entry.shape.iter().product::<usize>() != block.len() {
            return Err(TrainError::ShapeMismatch(format!("{} does not match its shape", entry.name)));
        }
    }

    let n_values: usize = blocks.iter().map(|b| b.len()).sum();
    let mut buf = Vec::with_capacity(PREFIX + json.len() + 8 * n_values + 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for block in blocks {
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let bytes = checkpoint_bytes(ckpt)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::CorruptFile(msg.into())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn tensor(&mut self, entry: &TensorEntry) -> Result<Vec<f64>> {
        let n: usize = entry.shape.iter().product();
        let end = self.pos + 8 * n;
        if end > self.data.len() {
            return Err(corrupt(format!("truncated in tensor {}", entry.name)));
        }
        let out = self.data[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos = end;
        Ok(out)
    }
}

fn read_params(
    r: &mut Reader,
    entries: &mut std::slice::Iter<TensorEntry>,
    cfg: &ModelConfig,
    n_bn: usize,
) -> Result<Parameters> {
    let n = param_layout(cfg)?.len();
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let e = entries.next().ok_or_else(|| corrupt("tensor list too short"))?;
        tensors.push(Tensor::new(&e.shape, r.tensor(e)?).map_err(|e| corrupt(e.to_string()))?);
    }
    let mut running = Vec::with_capacity(n_bn);
    for _ in 0..n_bn {
        let mean_e = entries.next().ok_or_else(|| corrupt("tensor list too short"))?;
        let mean = r.tensor(mean_e)?;
        let var_e = entries.next().ok_or_else(|| corrupt("tensor list too short"))?;
        let var = r.tensor(var_e)?;
        running.push(RunningStats { mean, var });
    }
    let p = Parameters { tensors, running };
    p.validate(cfg)?;
    Ok(p)
}

/// Parses checkpoint bytes. The version is checked before the checksum, so
/// a file from another format version reports `VersionMismatch`.
pub fn checkpoint_from_bytes(data: &[u8]) -> Result<Checkpoint> {
    if data.len() < PREFIX + 4 {
        return Err(corrupt(format!("file has only {} bytes", data.len())));
    }
    if &data[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let (body, crc_bytes) = data.split_at(data.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let header_len = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| PREFIX.checked_add(h))
        .filter(|&end| end <= body.len())
        .ok_or_else(|| corrupt("header length exceeds file"))?;
    let header: Header = serde_json::from_slice(&body[PREFIX..header_end]).map_err(|e| corrupt(e.to_string()))?;
    let cfg = &header.model_config;
    cfg.validate()?;

    let mut r = Reader { data: body, pos: header_end };
    let mut it = header.tensors.iter();
    let n_bn =
        header.tensors.iter().filter(|e| e.name.starts_with("params/") && e.name.ends_with(".running_mean")).count();
    let params = read_params(&mut r, &mut it, cfg, n_bn)?;
    let best_params = read_params(&mut r, &mut it, cfg, n_bn)?;
    let mut moments = |prefix: &str| -> Result<Vec<Tensor>> {
        params
            .tensors
            .iter()
            .map(|p| {
                let e = it.next().ok_or_else(|| corrupt("tensor list too short"))?;
                if !e.name.starts_with(prefix) || e.shape != p.shape() {
                    return Err(corrupt(format!("unexpected tensor {}", e.name)));
                }
                Tensor::new(&e.shape, r.tensor(e)?).map_err(|e| corrupt(e.to_string()))
            })
            .collect()
    };
    let m = moments("adam_m/")?;
    let v = moments("adam_v/")?;
    if it.next().is_some() || r.pos != body.len() {
        return Err(corrupt("trailing data"));
    }
    if header.shuffle_seed != header.train_config.seed {
        return Err(corrupt("shuffle seed disagrees with train config"));
    }
    Ok(Checkpoint {
        model_config: header.model_config,
        train_config: header.train_config,
        params,
        best_params,
        best_val_loss: header.best_val_loss,
        best_epoch: header.best_epoch,
        adam: AdamState { t: header.adam_t, m, v },
        epoch: header.epoch,
        history: header.history,
        stale_epochs: header.stale_epochs,
        stopped_early: header.stopped_early,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let data = std::fs::read(path)?;
    checkpoint_from_bytes(&data)
}
