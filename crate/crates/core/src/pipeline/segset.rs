//! Flat binary segment-set files with a JSON sidecar.
//!
//! Layout of the binary file: the 7-byte magic `ASCSEG1`, little-endian
//! `u32` segment count, little-endian `u32` segment length, then for each
//! segment `length` clean samples followed by `length` noisy samples, all
//! little-endian `f32`. The sidecar (same stem, `.json`) carries record ids,
//! offsets, normalization constants and the applied noise.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{Segment, SegmentSet, Split};
use super::noise::AppliedNoise;
use super::{PipelineError, Result};
use crate::util::write_atomic;

pub const SEGSET_MAGIC: &[u8; 7] = b"ASCSEG1";

#[derive(Debug, Serialize, Deserialize)]
struct SegmentMeta {
    record_id: String,
    offset: usize,
    norm_mean: f64,
    norm_scale: f64,
    noise: AppliedNoise,
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentManifest {
    format: String,
    split: Split,
    length: usize,
    n_segments: usize,
    segments: Vec<SegmentMeta>,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes `<path>` and its `.json` sidecar. Returns the sidecar path.
pub fn write_segment_set(set: &SegmentSet, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let len = set.length;
    let mut bytes = Vec::with_capacity(15 + set.len() * len * 8);
    bytes.extend_from_slice(SEGSET_MAGIC);
    bytes.extend_from_slice(&u32::try_from(set.len()).map_err(|_| fmt_err("too many segments"))?.to_le_bytes());
    bytes.extend_from_slice(&u32::try_from(len).map_err(|_| fmt_err("segment too long"))?.to_le_bytes());
    for s in &set.segments {
        if s.clean.len() != len || s.noisy.len() != len {
            return Err(PipelineError::LengthMismatch(s.clean.len(), len));
        }
        for v in s.clean.iter().chain(&s.noisy) {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = SegmentManifest {
        format: String::from_utf8_lossy(SEGSET_MAGIC).into_owned(),
        split: set.split,
        length: len,
        n_segments: set.len(),
        segments: set
            .segments
            .iter()
            .map(|s| SegmentMeta {
                record_id: s.record_id.clone(),
                offset: s.offset,
                norm_mean: s.norm_mean,
                norm_scale: s.norm_scale,
                noise: s.noise.clone(),
            })
            .collect(),
    };
    write_atomic(path, &bytes)?;
    let sidecar = sidecar_path(path);
    write_atomic(&sidecar, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(sidecar)
}

fn fmt_err(msg: impl Into<String>) -> PipelineError {
    PipelineError::Format(msg.into())
}

/// Reads a binary segment set and its sidecar. Samples come back widened
/// from `f32`.
pub fn read_segment_set(path: impl AsRef<Path>) -> Result<SegmentSet> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let manifest: SegmentManifest = serde_json::from_slice(&fs::read(sidecar_path(path))?)?;
    if bytes.len() < 15 || &bytes[..7] != SEGSET_MAGIC {
        return Err(fmt_err(format!("{}: bad magic", path.display())));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (count, len) = (word(7), word(11));
    if count != manifest.n_segments || count != manifest.segments.len() || len != manifest.length {
        return Err(fmt_err(format!("{}: header disagrees with sidecar", path.display())));
    }
    let expected = 15 + count * len * 2 * 4;
    if bytes.len() != expected {
        return Err(fmt_err(format!("{}: expected {expected} bytes, found {}", path.display(), bytes.len())));
    }
    let mut values = bytes[15..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let segments = manifest
        .segments
        .into_iter()
        .map(|m| {
            let clean: Vec<f64> = values.by_ref().take(len).collect();
            let noisy: Vec<f64> = values.by_ref().take(len).collect();
            Segment {
                clean,
                noisy,
                norm_mean: m.norm_mean,
                norm_scale: m.norm_scale,
                record_id: m.record_id,
                offset: m.offset,
                noise: m.noise,
            }
        })
        .collect();
    Ok(SegmentSet { segments, split: manifest.split, length: len })
}
