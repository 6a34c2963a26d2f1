use std::collections::BTreeMap;
use std::num::NonZeroUsize;
use std::thread;

use super::{Result, TrainError};
use crate::autograd::Tensor;
use crate::model::{self, ModelConfig, Parameters};
use crate::pipeline::ordered_bits;
use crate::pipeline::{denormalize, normalize, MetricsReport, MetricsRow, Segment, SegmentSet};

const EVAL_BATCH: usize = 32;

/// What produces the estimate for a segment.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    Model {
        config: &'a ModelConfig,
        params: &'a Parameters,
    },
    /// Returns the clean target (an oracle).
    CleanStub,
    /// Returns the noisy input unchanged.
    NoisyStub,
}

/// Worker count: available cores, capped by `ASCNET_THREADS` when set.
fn worker_count() -> usize {
    let cores = thread::available_parallelism().map_or(1, NonZeroUsize::get);
    match std::env::var("ASCNET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => cores.min(cap),
        _ => cores,
    }
}

/// Eval-mode predictions for normalized windows of length `cfg.segment_length`.
/// Work is split over threads in whole batches; results keep input order.
pub fn predict_segments(cfg: &ModelConfig, params: &Parameters, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let l = cfg.segment_length;
    if let Some(bad) = inputs.iter().find(|x| x.len() != l) {
        return Err(TrainError::ConfigMismatch(format!("window length {}, model expects {l}", bad.len())));
    }
    params.validate(cfg)?;
    let batches: Vec<&[&[f64]]> = inputs.chunks(EVAL_BATCH).collect();
    let run = |batch: &[&[f64]]| -> Result<Vec<Vec<f64>>> {
        let data = batch.iter().flat_map(|x| x.iter().copied()).collect();
        let x = Tensor::new(&[batch.len(), 1, l], data).expect("window length checked");
        let y = model::predict(cfg, params, x)?;
        Ok(y.data().chunks_exact(l).map(<[f64]>::to_vec).collect())
    };
    let workers = worker_count().min(batches.len()).max(1);
    let mut out = Vec::with_capacity(inputs.len());
    if workers == 1 {
        for b in &batches {
            out.extend(run(b)?);
        }
        return Ok(out);
    }
    let per_worker = batches.len().div_ceil(workers);
    let results: Vec<Result<Vec<Vec<f64>>>> = thread::scope(|s| {
        let handles: Vec<_> = batches
            .chunks(per_worker)
            .map(|group| {
                s.spawn(move || {
                    let mut acc = Vec::new();
                    for b in group {
                        acc.extend(run(b)?);
                    }
                    Ok(acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

impl Method<'_> {
    fn estimate(&self, segs: &[&Segment]) -> Result<Vec<Vec<f64>>> {
        match self {
            Method::CleanStub => Ok(segs.iter().map(|s| s.clean.clone()).collect()),
            Method::NoisyStub => Ok(segs.iter().map(|s| s.noisy.clone()).collect()),
            Method::Model { config, params } => {
                let inputs: Vec<&[f64]> = segs.iter().map(|s| s.noisy.as_slice()).collect();
                predict_segments(config, params, &inputs)
            }
        }
    }
}

/// Metrics per (record, noise kind, input SNR), pooling every segment of the
/// group. Signals are compared in the normalized domain the noise was
/// calibrated in.
pub fn evaluate(method: &Method, set: &SegmentSet) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(TrainError::EmptyDataset("test"));
    }
    if let Method::Model { config, .. } = method {
        if set.length != config.segment_length {
            return Err(TrainError::ConfigMismatch(format!(
                "segment length {}, model expects {}",
                set.length, config.segment_length
            )));
        }
    }
    let segs: Vec<&Segment> = set.segments.iter().collect();
    let estimates = method.estimate(&segs)?;

    type Key = (String, String, u64);
    let mut groups: BTreeMap<Key, (f64, [Vec<f64>; 3])> = BTreeMap::new();
    for (s, est) in segs.iter().zip(estimates) {
        let key = (s.record_id.clone(), s.noise.kind.to_string(), ordered_bits(s.noise.target_snr_db));
        let entry = groups.entry(key).or_insert_with(|| (s.noise.target_snr_db, Default::default()));
        entry.1[0].extend_from_slice(&s.clean);
        entry.1[1].extend_from_slice(&s.noisy);
        entry.1[2].extend(est);
    }
    let rows = groups
        .into_iter()
        .map(|((record, kind, _), (snr, [clean, noisy, est]))| {
            MetricsRow::compute(&record, &kind, snr, &clean, &noisy, &est).map_err(TrainError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_rows(rows))
}

/// Window starts covering `n` samples with hop `len / 2`; the last window
/// is aligned to the end. A signal shorter than `len` gets one window.
pub fn stitch_starts(n: usize, len: usize) -> Vec<usize> {
    let hop = (len / 2).max(1);
    if n <= len {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..).map(|i| i * hop).take_while(|s| s + len < n).collect();
    starts.push(n - len);
    starts
}

/// Triangular window `min(t + 0.5, len - t - 0.5) / (len / 2)`. Shifted by
/// half its length, two copies sum to exactly one.
pub fn triangular_weights(len: usize) -> Vec<f64> {
    let half = len as f64 / 2.0;
    (0..len).map(|t| (t as f64 + 0.5).min(len as f64 - t as f64 - 0.5) / half).collect()
}

/// Denoises a whole signal by standardizing overlapping windows, running
/// `denoise` on them, undoing the standardization and blending the windows
/// with triangular weights normalized by their sum. Short signals are padded
/// with their last value.
pub fn denoise_record_with(
    signal: &[f64],
    len: usize,
    denoise: impl FnOnce(&[&[f64]]) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(TrainError::EmptyDataset("record"));
    }
    let n = signal.len();
    let mut padded = signal.to_vec();
    padded.resize(n.max(len), *signal.last().expect("non-empty"));
    let starts = stitch_starts(padded.len(), len);
    let normed: Vec<(Vec<f64>, f64, f64)> = starts.iter().map(|&s| normalize(&padded[s..s + len])).collect();
    let inputs: Vec<&[f64]> = normed.iter().map(|(x, _, _)| x.as_slice()).collect();
    let outputs = denoise(&inputs)?;
    if outputs.len() != starts.len() || outputs.iter().any(|o| o.len() != len) {
        return Err(TrainError::ShapeMismatch("denoiser returned wrong window count or length".into()));
    }
    let w = triangular_weights(len);
    let mut acc = vec![0.0; padded.len()];
    let mut wsum = vec![0.0; padded.len()];
    for ((&s, out), (_, mean, scale)) in starts.iter().zip(&outputs).zip(&normed) {
        for (t, v) in denormalize(out, *mean, *scale).into_iter().enumerate() {
            acc[s + t] += w[t] * v;
            wsum[s + t] += w[t];
        }
    }
    Ok(acc.iter().zip(&wsum).take(n).map(|(a, w)| a / w).collect())
}

/// [`denoise_record_with`] using the network.
pub fn denoise_record(cfg: &ModelConfig, params: &Parameters, signal: &[f64]) -> Result<Vec<f64>> {
    denoise_record_with(signal, cfg.segment_length, |windows| predict_segments(cfg, params, windows))
}
