//! Synthetic ECG-like surrogates and noise waveforms for runs without the
//! MIT-BIH files.
//!
//! The ECG surrogate is a train of Gaussian P/QRS/T bumps with beat-to-beat
//! jitter, a few slow sinusoids, and occasional wide premature (ectopic-like)
//! beats. It is not physiologically faithful; it only has to look enough like
//! an ECG to make the denoising task non-trivial.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::noise::NoiseKind;
use crate::wfdb::SignalRecord;

struct Wave {
    amp: f64,
    center: f64,
    width: f64,
}

fn add_wave(out: &mut [f64], fs: f64, beat_time: f64, w: &Wave) {
    let c = (beat_time + w.center) * fs;
    let half = (4.0 * w.width * fs).ceil() as isize;
    let start = (c.floor() as isize - half).max(0);
    let end = (c.ceil() as isize + half).min(out.len() as isize - 1);
    let denom = 2.0 * (w.width * fs).powi(2);
    for i in start..=end {
        let d = i as f64 - c;
        out[i as usize] += w.amp * (-d * d / denom).exp();
    }
}

/// ECG-like surrogate in mV, `seconds` long at `fs` Hz.
pub fn synthetic_ecg(seconds: f64, fs: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = (seconds * fs).round() as usize;
    let mut x = vec![0.0; n];

    let hr = rng.random_range(55.0..95.0);
    let rr_mean = 60.0 / hr;
    let r_amp = rng.random_range(0.8..1.6);
    let t_amp = rng.random_range(0.15..0.4);

    let mut t = rng.random_range(0.1..rr_mean);
    while t < seconds + 0.5 {
        let jitter = 1.0 + 0.05 * rng.sample::<f64, _>(StandardNormal);
        if rng.random::<f64>() < 0.08 {
            // Wide premature beat without a P wave.
            let amp = r_amp * rng.random_range(-1.4..1.6);
            add_wave(&mut x, fs, t, &Wave { amp, center: 0.0, width: 0.035 });
            add_wave(&mut x, fs, t, &Wave { amp: -0.4 * amp, center: 0.22, width: 0.07 });
            t += rr_mean * 1.4 * jitter;
            continue;
        }
        let beat = [
            Wave { amp: 0.12, center: -0.18, width: 0.022 },
            Wave { amp: -0.12 * r_amp, center: -0.03, width: 0.008 },
            Wave { amp: r_amp, center: 0.0, width: 0.011 },
            Wave { amp: -0.25 * r_amp, center: 0.03, width: 0.009 },
            Wave { amp: t_amp, center: 0.24, width: 0.05 },
        ];
        for w in &beat {
            add_wave(&mut x, fs, t, w);
        }
        t += rr_mean * jitter;
    }

    for _ in 0..3 {
        let f = rng.random_range(0.05..0.6);
        let a = rng.random_range(0.005..0.04);
        let phase = rng.random_range(0.0..2.0 * PI);
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * i as f64 / fs + phase).sin();
        }
    }
    x
}

fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut acc = 0.0;
    for i in 0..x.len() {
        acc += x[i];
        if i >= width {
            acc -= x[i - width];
        }
        out[i] = acc / width.min(i + 1) as f64;
    }
    out
}

/// Surrogate for a noise-stress-test waveform of the given base kind.
pub fn synthetic_noise(kind: &NoiseKind, n: usize, fs: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    match kind {
        NoiseKind::Bw => {
            let mut x = vec![0.0; n];
            for _ in 0..6 {
                let f = rng.random_range(0.05..0.5);
                let a = rng.random_range(0.1..0.5);
                let phase = rng.random_range(0.0..2.0 * PI);
                for (i, v) in x.iter_mut().enumerate() {
                    *v += a * (2.0 * PI * f * i as f64 / fs + phase).sin();
                }
            }
            x
        }
        NoiseKind::Em => {
            // Slow wander plus sparse step-like transients.
            let mut x = moving_average(&white, (fs / 4.0) as usize);
            let mut level = 0.0;
            for v in x.iter_mut() {
                if rng.random::<f64>() < 2.0 / fs {
                    level = rng.random_range(-1.0..1.0);
                }
                level *= 0.999;
                *v = 3.0 * *v + level;
            }
            x
        }
        NoiseKind::Ma => {
            let hf = moving_average(&white, 3);
            let envelope = moving_average(&(0..n).map(|_| rng.random::<f64>()).collect::<Vec<_>>(), fs as usize);
            hf.iter().zip(envelope).map(|(h, e)| h * (0.3 + 2.0 * e)).collect()
        }
        NoiseKind::Awgn | NoiseKind::Mix(_) => white,
    }
}

/// `count` surrogate records named `s000`, `s001`, ...
pub fn synthetic_records(count: usize, seconds: f64, fs: f64, seed: u64) -> Vec<SignalRecord> {
    (0..count)
        .map(|i| {
            let samples = synthetic_ecg(seconds, fs, seed.wrapping_add(i as u64 * 7919));
            SignalRecord::from_samples(&format!("s{i:03}"), fs, samples)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_is_deterministic_and_beating() {
        let a = synthetic_ecg(10.0, 360.0, 1);
        assert_eq!(a, synthetic_ecg(10.0, 360.0, 1));
        assert_eq!(a.len(), 3600);
        let peak = a.iter().cloned().fold(f64::MIN, f64::max);
        assert!(peak > 0.5);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn noise_surrogates_have_power() {
        for kind in [NoiseKind::Bw, NoiseKind::Em, NoiseKind::Ma] {
            let x = synthetic_noise(&kind, 5000, 360.0, 3);
            assert_eq!(x.len(), 5000);
            assert!(x.iter().map(|v| v * v).sum::<f64>() > 0.0);
        }
    }
}
