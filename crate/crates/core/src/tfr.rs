//! Short-time Fourier analysis, overlap-add synthesis and time-frequency
//! masking.
//!
//! A noisy observation decomposes additively in the STFT domain,
//! `X(t, f) = S(t, f) + N(t, f)`, and a mask `M(t, f)` yields the estimate
//! `M(t, f) X(t, f)` which is mapped back with the inverse transform. The
//! network itself works on time samples; this module is used for
//! diagnostics and as an ideal-mask reference.

use std::io::Write;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

pub const DEFAULT_WINDOW: usize = 256;
pub const DEFAULT_HOP: usize = 128;
const COLA_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TfrError {
    #[error("window/hop pair violates constant overlap-add: {0}")]
    BadWindow(String),
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch { expected: (usize, usize), actual: (usize, usize) },
    #[error("mask values must be finite and non-negative")]
    InvalidMask,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TfrError>;

/// Periodic Hann window, COLA at hop `len / 2`.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len).map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos()).collect()
}

/// Checks that shifted copies of `window` at `hop` sum to a positive constant.
pub fn check_cola(window: &[f64], hop: usize) -> Result<f64> {
    let w = window.len();
    if w == 0 {
        return Err(TfrError::EmptyInput);
    }
    if hop == 0 || hop > w {
        return Err(TfrError::BadWindow(format!("hop {hop} with window length {w}")));
    }
    let sums: Vec<f64> = (0..hop).map(|n| (n..w).step_by(hop).map(|i| window[i]).sum()).collect();
    let reference = sums[0];
    if reference <= 0.0 || !reference.is_finite() {
        return Err(TfrError::BadWindow("overlap sum is not positive".into()));
    }
    for (n, s) in sums.iter().enumerate() {
        if (s - reference).abs() > COLA_TOL * reference {
            return Err(TfrError::BadWindow(format!("overlap sum {s} at offset {n} differs from {reference}")));
        }
    }
    Ok(reference)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    /// `n_frames` rows of `window.len() / 2 + 1` bins.
    pub frames: Vec<Vec<Complex64>>,
    pub window: Vec<f64>,
    pub hop: usize,
    pub original_length: usize,
}

impl Spectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn n_bins(&self) -> usize {
        self.window.len() / 2 + 1
    }

    fn pad(&self) -> usize {
        self.window.len() - self.hop
    }

    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        self.frames.iter().map(|f| f.iter().map(|c| c.norm()).collect()).collect()
    }

    /// Dumps `frame,bin,re,im` rows for plotting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "frame,bin,re,im")?;
        for (k, frame) in self.frames.iter().enumerate() {
            for (b, c) in frame.iter().enumerate() {
                writeln!(w, "{k},{b},{},{}", c.re, c.im)?;
            }
        }
        Ok(())
    }
}

/// Forward STFT. The signal is zero-padded by `W - hop` on both sides (and
/// up to a whole number of hops on the right) so that every input sample is
/// covered by a full set of overlapping frames.
pub fn stft(x: &[f64], window: &[f64], hop: usize) -> Result<Spectrogram> {
    if x.is_empty() {
        return Err(TfrError::EmptyInput);
    }
    check_cola(window, hop)?;
    let w = window.len();
    let pad = w - hop;
    let base = x.len() + 2 * pad;
    let total = if base <= w { w } else { w + (base - w).div_ceil(hop) * hop };
    let mut padded = vec![0.0; total];
    padded[pad..pad + x.len()].copy_from_slice(x);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(w);
    let n_bins = w / 2 + 1;
    let frames = (0..=(total - w) / hop)
        .map(|k| {
            let mut buf: Vec<Complex64> =
                padded[k * hop..k * hop + w].iter().zip(window).map(|(s, g)| Complex64::new(s * g, 0.0)).collect();
            fft.process(&mut buf);
            buf.truncate(n_bins);
            buf
        })
        .collect();
    Ok(Spectrogram { frames, window: window.to_vec(), hop, original_length: x.len() })
}

/// Inverse STFT by overlap-add, normalized by the summed analysis window,
/// truncated to the original length.
pub fn istft(spec: &Spectrogram) -> Result<Vec<f64>> {
    check_cola(&spec.window, spec.hop)?;
    let w = spec.window.len();
    let n_bins = spec.n_bins();
    let out_len = spec.frames.len().saturating_sub(1) * spec.hop + w;
    let mut acc = vec![0.0; out_len];
    let mut weight = vec![0.0; out_len];
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(w);
    for (k, frame) in spec.frames.iter().enumerate() {
        if frame.len() != n_bins {
            return Err(TfrError::ShapeMismatch {
                expected: (spec.frames.len(), n_bins),
                actual: (spec.frames.len(), frame.len()),
            });
        }
        let mut full = vec![Complex64::new(0.0, 0.0); w];
        full[..n_bins].copy_from_slice(frame);
        for b in n_bins..w {
            full[b] = full[w - b].conj();
        }
        ifft.process(&mut full);
        let start = k * spec.hop;
        for i in 0..w {
            acc[start + i] += full[i].re / w as f64;
            weight[start + i] += spec.window[i];
        }
    }
    let pad = spec.pad();
    Ok((pad..pad + spec.original_length)
        .map(|i| {
            let (a, g) = (acc.get(i).copied().unwrap_or(0.0), weight.get(i).copied().unwrap_or(0.0));
            if g > 1e-12 {
                a / g
            } else {
                0.0
            }
        })
        .collect())
}

/// Scales every bin by a non-negative real mask, preserving phase.
pub fn apply_mask(spec: &Spectrogram, mask: &[Vec<f64>]) -> Result<Spectrogram> {
    let expected = (spec.n_frames(), spec.n_bins());
    let actual = (mask.len(), mask.first().map_or(0, Vec::len));
    if expected != actual || mask.iter().any(|r| r.len() != expected.1) {
        return Err(TfrError::ShapeMismatch { expected, actual });
    }
    if mask.iter().flatten().any(|m| !m.is_finite() || *m < 0.0) {
        return Err(TfrError::InvalidMask);
    }
    let frames = spec.frames.iter().zip(mask).map(|(f, m)| f.iter().zip(m).map(|(c, g)| c * g).collect()).collect();
    Ok(Spectrogram { frames, ..spec.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hann_is_cola_at_half_overlap() {
        let w = hann_window(256);
        assert!((check_cola(&w, 128).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(check_cola(&w, 100), Err(TfrError::BadWindow(_))));
        assert!(matches!(check_cola(&w, 300), Err(TfrError::BadWindow(_))));
        assert!(matches!(check_cola(&w, 0), Err(TfrError::BadWindow(_))));
    }

    #[test]
    fn zero_signal_gives_zero_frames() {
        let s = stft(&[0.0; 300], &hann_window(64), 32).unwrap();
        assert_eq!(s.n_bins(), 33);
        assert!(s.frames.iter().flatten().all(|c| c.norm() == 0.0));
        assert_eq!(istft(&s).unwrap(), vec![0.0; 300]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(stft(&[], &hann_window(8), 4), Err(TfrError::EmptyInput)));
    }

    #[test]
    fn truncates_to_original_length() {
        let x: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let s = stft(&x, &hann_window(16), 8).unwrap();
        let y = istft(&s).unwrap();
        assert_eq!(y.len(), 37);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_identity_and_zero() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.3).cos()).collect();
        let s = stft(&x, &hann_window(64), 32).unwrap();
        let ones = vec![vec![1.0; s.n_bins()]; s.n_frames()];
        let same = apply_mask(&s, &ones).unwrap();
        assert_eq!(same.magnitudes(), s.magnitudes());
        assert_eq!(same, s);
        let zeros = vec![vec![0.0; s.n_bins()]; s.n_frames()];
        assert!(apply_mask(&s, &zeros).unwrap().frames.iter().flatten().all(|c| c.norm() == 0.0));
        assert!(matches!(apply_mask(&s, &ones[1..]), Err(TfrError::ShapeMismatch { .. })));
        let mut neg = ones.clone();
        neg[0][0] = -1.0;
        assert!(matches!(apply_mask(&s, &neg), Err(TfrError::InvalidMask)));
    }

    #[test]
    fn csv_dump() {
        let s = stft(&[1.0; 8], &[1.0; 4], 4).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("frame,bin,re,im\n"));
        assert_eq!(text.lines().count(), 1 + s.n_frames() * 3);
    }
}
