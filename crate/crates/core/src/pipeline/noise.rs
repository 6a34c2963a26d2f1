use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::metrics::signal_power;
use super::{PipelineError, Result};
use crate::wfdb::SignalRecord;

/// Noise families. `Mix` sums its components before a single SNR scaling.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NoiseKind {
    Awgn,
    /// Baseline wander.
    Bw,
    /// Electrode motion.
    Em,
    /// Muscle / motion artifact.
    Ma,
    Mix(Vec<NoiseKind>),
}

impl NoiseKind {
    /// Base kinds making up this noise, in order.
    pub fn components(&self) -> Vec<NoiseKind> {
        match self {
            NoiseKind::Mix(parts) => parts.clone(),
            k => vec![k.clone()],
        }
    }

    /// Whether this kind is drawn from a recorded noise source.
    pub fn needs_source(&self) -> bool {
        self.components().iter().any(|k| *k != NoiseKind::Awgn)
    }

    /// WFDB record name of the noise-stress-test source for a base kind.
    pub fn record_name(&self) -> Option<&'static str> {
        match self {
            NoiseKind::Bw => Some("bw"),
            NoiseKind::Em => Some("em"),
            NoiseKind::Ma => Some("ma"),
            _ => None,
        }
    }

    pub fn mix(parts: Vec<NoiseKind>) -> Result<Self> {
        if parts.len() < 2 {
            return Err(PipelineError::InvalidNoiseKind("a mix needs at least two kinds".into()));
        }
        for (i, p) in parts.iter().enumerate() {
            if matches!(p, NoiseKind::Mix(_)) {
                return Err(PipelineError::InvalidNoiseKind("nested mix".into()));
            }
            if parts[..i].contains(p) {
                return Err(PipelineError::InvalidNoiseKind(format!("repeated component {p}")));
            }
        }
        Ok(NoiseKind::Mix(parts))
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NoiseKind::Awgn => f.write_str("awgn"),
            NoiseKind::Bw => f.write_str("bw"),
            NoiseKind::Em => f.write_str("em"),
            NoiseKind::Ma => f.write_str("ma"),
            NoiseKind::Mix(parts) => {
                let labels: Vec<String> = parts.iter().map(ToString::to_string).collect();
                f.write_str(&labels.join("+"))
            }
        }
    }
}

impl FromStr for NoiseKind {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        let base = |t: &str| match t.trim().to_ascii_lowercase().as_str() {
            "awgn" | "white" => Ok(NoiseKind::Awgn),
            "bw" => Ok(NoiseKind::Bw),
            "em" => Ok(NoiseKind::Em),
            "ma" => Ok(NoiseKind::Ma),
            other => Err(PipelineError::InvalidNoiseKind(other.to_string())),
        };
        if s.contains('+') {
            NoiseKind::mix(s.split('+').map(base).collect::<Result<_>>()?)
        } else {
            base(s)
        }
    }
}

impl TryFrom<String> for NoiseKind {
    type Error = PipelineError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<NoiseKind> for String {
    fn from(k: NoiseKind) -> String {
        k.to_string()
    }
}

/// Recorded noise waveforms keyed by base kind.
pub type NoiseSources = BTreeMap<NoiseKind, Arc<SignalRecord>>;

#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub target_snr_db: f64,
    pub sources: NoiseSources,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn awgn(target_snr_db: f64, seed: u64) -> Self {
        Self { kind: NoiseKind::Awgn, target_snr_db, sources: NoiseSources::new(), seed }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCrop {
    pub source: String,
    pub offset: usize,
}

/// What was actually mixed into a segment: enough to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedNoise {
    pub kind: NoiseKind,
    pub target_snr_db: f64,
    pub seed: u64,
    pub crops: Vec<NoiseCrop>,
}

/// `len` i.i.d. standard normal samples.
///
/// The generator is ChaCha8 (`rand_chacha::ChaCha8Rng::seed_from_u64(seed)`)
/// and normals are drawn with the ziggurat sampler of
/// `rand_distr::StandardNormal`, so the output is a pure function of
/// `(len, seed)`.
pub fn gen_awgn(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Adds noise scaled to `spec.target_snr_db` relative to `clean`.
pub fn mix_noise(clean: &[f64], spec: &NoiseSpec) -> Result<Vec<f64>> {
    mix_noise_detailed(clean, spec).map(|(noisy, _)| noisy)
}

/// Like [`mix_noise`] but also reports the crops and seed used.
///
/// Recorded noise is a seed-chosen contiguous crop of its source. For a
/// mix, component noises are summed first and the sum is scaled once, so
/// the measured SNR of `noisy - clean` matches the target.
pub(crate) fn mix_noise_detailed(clean: &[f64], spec: &NoiseSpec) -> Result<(Vec<f64>, AppliedNoise)> {
    if clean.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    let p_clean = signal_power(clean);
    if p_clean == 0.0 {
        return Err(PipelineError::ZeroPowerClean);
    }
    let len = clean.len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut noise = vec![0.0; len];
    let mut crops = Vec::new();
    for component in spec.kind.components() {
        match component {
            NoiseKind::Awgn => {
                let seed = if spec.kind == NoiseKind::Awgn { spec.seed } else { rng.random() };
                for (n, g) in noise.iter_mut().zip(gen_awgn(len, seed)) {
                    *n += g;
                }
            }
            ref kind => {
                let source =
                    spec.sources.get(kind).ok_or_else(|| PipelineError::MissingNoiseSource(kind.to_string()))?;
                if source.len() < len {
                    return Err(PipelineError::NoiseSourceTooShort {
                        name: source.name().to_string(),
                        len: source.len(),
                        needed: len,
                    });
                }
                let offset = rng.random_range(0..=source.len() - len);
                for (n, s) in noise.iter_mut().zip(&source.samples_mv[offset..offset + len]) {
                    *n += s;
                }
                crops.push(NoiseCrop { source: source.name().to_string(), offset });
            }
        }
    }
    let p_noise = signal_power(&noise);
    if p_noise == 0.0 {
        return Err(PipelineError::ZeroPowerNoise);
    }
    let gain = (p_clean / (p_noise * 10f64.powf(spec.target_snr_db / 10.0))).sqrt();
    let noisy = clean.iter().zip(&noise).map(|(c, n)| c + gain * n).collect();
    Ok((noisy, AppliedNoise { kind: spec.kind.clone(), target_snr_db: spec.target_snr_db, seed: spec.seed, crops }))
}
