use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::noise::{mix_noise_detailed, AppliedNoise, NoiseSpec};
use super::{normalize, segment, PipelineError, Result};
use crate::wfdb::SignalRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// A (clean, noisy) pair in the normalized domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub norm_mean: f64,
    pub norm_scale: f64,
    pub record_id: String,
    pub offset: usize,
    pub noise: AppliedNoise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentSet {
    pub segments: Vec<Segment>,
    pub split: Split,
    pub length: usize,
}

impl SegmentSet {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn record_ids(&self) -> BTreeSet<&str> {
        self.segments.iter().map(|s| s.record_id.as_str()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(PipelineError::InvalidFractions(format!("{self:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PipelineError::InvalidFractions("fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Record counts per split; every split gets at least one record.
    fn counts(&self, n: usize) -> (usize, usize, usize) {
        let mut val = ((self.val * n as f64).round() as usize).max(1);
        let mut test = ((self.test * n as f64).round() as usize).max(1);
        while val + test > n - 1 {
            if val >= test {
                val -= 1;
            } else {
                test -= 1;
            }
        }
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: SegmentSet,
    pub val: SegmentSet,
    pub test: SegmentSet,
}

/// Per-segment noise seed: SHA-256 over the dataset seed, record id,
/// offset and noise spec, truncated to its first eight bytes.
pub fn derive_segment_seed(seed: u64, record_id: &str, offset: usize, spec: &NoiseSpec) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(record_id.as_bytes());
    h.update([0u8]);
    h.update((offset as u64).to_le_bytes());
    h.update(spec.kind.to_string().as_bytes());
    h.update([0u8]);
    h.update(spec.target_snr_db.to_bits().to_le_bytes());
    h.update(spec.seed.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn build_split(
    records: &[&SignalRecord],
    specs: &[NoiseSpec],
    length: usize,
    stride: usize,
    seed: u64,
    split: Split,
) -> Result<SegmentSet> {
    let mut segments = Vec::new();
    for record in records {
        let id = record.name();
        for (offset, window) in segment(&record.samples_mv, length, stride)? {
            // A flat window has no signal power to calibrate noise against.
            if window.iter().all(|v| *v == window[0]) {
                continue;
            }
            let (clean, norm_mean, norm_scale) = normalize(&window);
            for spec in specs {
                let seg_spec = spec.with_seed(derive_segment_seed(seed, id, offset, spec));
                let (noisy, noise) = mix_noise_detailed(&clean, &seg_spec)?;
                segments.push(Segment {
                    clean: clean.clone(),
                    noisy,
                    norm_mean,
                    norm_scale,
                    record_id: id.to_string(),
                    offset,
                    noise,
                });
            }
        }
    }
    Ok(SegmentSet { segments, split, length })
}

/// Shuffles records by `seed`, splits them record-wise and emits one noisy
/// segment per (window, spec); constant windows are skipped. Windows are standardized before noise is
/// added, so the target SNR holds in the normalized domain.
pub fn build_dataset(
    records: &[SignalRecord],
    specs: &[NoiseSpec],
    length: usize,
    stride: usize,
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetSplits> {
    if records.len() < 3 {
        return Err(PipelineError::InsufficientRecords(records.len()));
    }
    fractions.validate()?;
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(r.name()) {
            return Err(PipelineError::DuplicateRecordId(r.name().to_string()));
        }
    }

    let mut order: Vec<&SignalRecord> = records.iter().collect();
    order.sort_by(|a, b| a.name().cmp(b.name()));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = fractions.counts(order.len());
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);

    Ok(DatasetSplits {
        train: build_split(train, specs, length, stride, seed, Split::Train)?,
        val: build_split(val, specs, length, stride, seed, Split::Val)?,
        test: build_split(test, specs, length, stride, seed, Split::Test)?,
    })
}
