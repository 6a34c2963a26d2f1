//! Segmentation, normalization, calibrated noise injection, dataset
//! assembly and evaluation metrics.

mod dataset;
mod metrics;
mod noise;
mod segset;
pub mod synth;

pub use dataset::{build_dataset, derive_segment_seed, DatasetSplits, Segment, SegmentSet, Split, SplitFractions};
pub(crate) use metrics::ordered_bits;
pub use metrics::{
    mse, prd, rmse, signal_power, snr_improvement, snr_out, MetricsAggregate, MetricsReport, MetricsRow,
    METRICS_CSV_HEADER,
};
pub use noise::{gen_awgn, mix_noise, AppliedNoise, NoiseCrop, NoiseKind, NoiseSources, NoiseSpec};
pub use segset::{read_segment_set, write_segment_set, SEGSET_MAGIC};

use thiserror::Error;

/// Lower bound on the normalization scale; guards constant segments.
pub const NORM_EPS: f64 = 1e-8;
/// Default segment length in samples (about 2.84 s at 360 Hz).
pub const DEFAULT_SEGMENT_LENGTH: usize = 1024;
pub const DEFAULT_STRIDE: usize = 512;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("signal of length {len} is shorter than segment length {segment_length}")]
    SignalTooShort { len: usize, segment_length: usize },
    #[error("segment length and stride must be at least 1")]
    InvalidWindow,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("clean signal has zero power")]
    ZeroPowerClean,
    #[error("noise has zero power")]
    ZeroPowerNoise,
    #[error("no noise source supplied for {0}")]
    MissingNoiseSource(String),
    #[error("noise source {name} has {len} samples, need at least {needed}")]
    NoiseSourceTooShort { name: String, len: usize, needed: usize },
    #[error("invalid noise kind: {0}")]
    InvalidNoiseKind(String),
    #[error("need at least 3 records for a record-wise split, got {0}")]
    InsufficientRecords(usize),
    #[error("duplicate record id {0}")]
    DuplicateRecordId(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("segment set file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// Fixed-length windows at offsets `0, stride, 2*stride, ...`; an
/// incomplete tail is dropped. Returns `(offset, window)` pairs.
pub fn segment(signal: &[f64], length: usize, stride: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    if length == 0 || stride == 0 {
        return Err(PipelineError::InvalidWindow);
    }
    if signal.len() < length {
        return Err(PipelineError::SignalTooShort { len: signal.len(), segment_length: length });
    }
    let count = (signal.len() - length) / stride + 1;
    Ok((0..count)
        .map(|i| {
            let off = i * stride;
            (off, signal[off..off + length].to_vec())
        })
        .collect())
}

/// Standardizes `x`: returns `(y, mean, scale)` with
/// `scale = max(std(x), NORM_EPS)` (population standard deviation).
pub fn normalize(x: &[f64]) -> (Vec<f64>, f64, f64) {
    if x.is_empty() {
        return (Vec::new(), 0.0, 1.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = var.sqrt().max(NORM_EPS);
    let y = x.iter().map(|v| (v - mean) / scale).collect();
    (y, mean, scale)
}

pub fn denormalize(y: &[f64], mean: f64, scale: f64) -> Vec<f64> {
    y.iter().map(|v| v * scale + mean).collect()
}
