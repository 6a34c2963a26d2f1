//! WFDB header parsing and format 212 decoding.
//!
//! Only the subset needed for MIT-BIH arrhythmia records and the
//! noise-stress-test records is supported: single-segment records whose
//! signals are stored in format 212 (two 12-bit two's-complement samples
//! packed into three bytes). Annotation files are not read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The only signal storage format this crate decodes.
pub const FORMAT_212: u32 = 212;

/// WFDB default when a header omits the sampling frequency.
const DEFAULT_SAMPLING_RATE: f64 = 250.0;
/// WFDB default when the ADC gain field is missing or zero.
const DEFAULT_GAIN: f64 = 200.0;

#[derive(Debug, Error)]
pub enum WfdbError {
    #[error("malformed header at line {line}: {reason}")]
    MalformedHeader { line: usize, reason: String },
    #[error("unsupported signal format {code} (only format 212 is supported)")]
    UnsupportedFormat { code: u32 },
    #[error("truncated signal file: need {expected} bytes, found {actual}")]
    TruncatedFile { expected: usize, actual: usize },
    #[error("signal gain is zero")]
    ZeroGain,
    #[error("channel {channel} out of range for record with {n_signals} signal(s)")]
    ChannelOutOfRange { channel: usize, n_signals: usize },
    #[error("invalid signal count {0}")]
    InvalidSignalCount(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, WfdbError>;

/// Per-signal line of a header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub file_name: String,
    pub format_code: u32,
    /// ADC units per physical unit (normally mV).
    pub gain: f64,
    /// ADC value corresponding to 0 physical units.
    pub baseline: i32,
    pub units_label: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub record_name: String,
    pub n_signals: usize,
    pub sampling_rate: f64,
    /// Samples per signal. Zero when the header leaves it unspecified.
    pub n_samples: usize,
    pub signals: Vec<SignalSpec>,
}

/// One decoded channel in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub header: RecordHeader,
    pub channel_index: usize,
    pub samples_mv: Vec<f64>,
    pub source_path: String,
}

impl SignalRecord {
    /// Builds a record from samples that did not come from disk (synthetic
    /// surrogates, in-memory fixtures).
    pub fn from_samples(name: &str, sampling_rate: f64, samples_mv: Vec<f64>) -> Self {
        let header = RecordHeader {
            record_name: name.to_string(),
            n_signals: 1,
            sampling_rate,
            n_samples: samples_mv.len(),
            signals: vec![SignalSpec {
                file_name: format!("{name}.dat"),
                format_code: FORMAT_212,
                gain: DEFAULT_GAIN,
                baseline: 0,
                units_label: "mV".to_string(),
                description: name.to_string(),
            }],
        };
        Self { header, channel_index: 0, samples_mv, source_path: String::new() }
    }

    pub fn len(&self) -> usize {
        self.samples_mv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples_mv.is_empty()
    }

    pub fn name(&self) -> &str {
        &self.header.record_name
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> WfdbError {
    WfdbError::MalformedHeader { line, reason: reason.into() }
}

/// Parses a leading unsigned integer, ignoring any suffix such as `x2` or `:3`.
fn leading_uint(field: &str) -> Option<u32> {
    let end = field.find(|c: char| !c.is_ascii_digit()).unwrap_or(field.len());
    field[..end].parse().ok()
}

/// Parses the content of a `.hea` file.
///
/// Lines starting with `#` are comments. The first remaining line is the
/// record line (`name[/nseg] nsig [fs[/cfreq[(base)]] [nsamp ...]]`), followed
/// by one line per signal:
/// `file format[x..][:..][+..] [gain[(baseline)][/units] [adcres [adczero [initval [checksum [blocksize [description]]]]]]]`.
pub fn parse_header(text: &str) -> Result<RecordHeader> {
    let mut lines =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (rec_line_no, rec_line) = lines.next().ok_or_else(|| malformed(0, "missing record line"))?;
    let fields: Vec<&str> = rec_line.split_whitespace().collect();
    let record_name = fields[0].split('/').next().unwrap_or_default().to_string();
    if fields[0].contains('/') {
        return Err(malformed(rec_line_no, "multi-segment records are not supported"));
    }
    let n_signals: usize = fields
        .get(1)
        .ok_or_else(|| malformed(rec_line_no, "missing signal count"))?
        .parse()
        .map_err(|_| malformed(rec_line_no, "non-numeric signal count"))?;
    if n_signals == 0 {
        return Err(malformed(rec_line_no, "signal count must be at least 1"));
    }
    let sampling_rate = match fields.get(2) {
        None => DEFAULT_SAMPLING_RATE,
        Some(f) => {
            let fs = f.split(['/', '(']).next().unwrap_or_default();
            fs.parse::<f64>().map_err(|_| malformed(rec_line_no, format!("non-numeric sampling rate {f:?}")))?
        }
    };
    if !(sampling_rate > 0.0 && sampling_rate.is_finite()) {
        return Err(malformed(rec_line_no, "sampling rate must be positive"));
    }
    let n_samples: usize = match fields.get(3) {
        None => 0,
        Some(f) => f.parse().map_err(|_| malformed(rec_line_no, format!("non-numeric sample count {f:?}")))?,
    };

    let mut signals = Vec::with_capacity(n_signals);
    for _ in 0..n_signals {
        let (line_no, line) = lines.next().ok_or_else(|| {
            malformed(rec_line_no, format!("expected {n_signals} signal lines, found {}", signals.len()))
        })?;
        signals.push(parse_signal_line(line_no, line)?);
    }

    Ok(RecordHeader { record_name, n_signals, sampling_rate, n_samples, signals })
}

fn parse_signal_line(line_no: usize, line: &str) -> Result<SignalSpec> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let file_name = fields[0].to_string();
    let format_code = fields
        .get(1)
        .and_then(|f| leading_uint(f))
        .ok_or_else(|| malformed(line_no, "missing or non-numeric format"))?;

    let mut gain = DEFAULT_GAIN;
    let mut baseline = None;
    let mut units_label = "mV".to_string();
    if let Some(g) = fields.get(2) {
        let (gain_part, units) = match g.split_once('/') {
            Some((a, u)) => (a, Some(u)),
            None => (*g, None),
        };
        let gain_str = match gain_part.split_once('(') {
            Some((a, rest)) => {
                let inner = rest.strip_suffix(')').ok_or_else(|| malformed(line_no, "unterminated baseline"))?;
                baseline = Some(
                    inner.parse::<i32>().map_err(|_| malformed(line_no, format!("non-numeric baseline {inner:?}")))?,
                );
                a
            }
            None => gain_part,
        };
        let parsed: f64 = gain_str.parse().map_err(|_| malformed(line_no, format!("non-numeric gain {gain_str:?}")))?;
        if parsed != 0.0 {
            gain = parsed;
        }
        if let Some(u) = units {
            units_label = u.to_string();
        }
    }
    // fields[3] is the ADC resolution; fields[4] the ADC zero, which also
    // serves as the baseline when none is given in parentheses.
    if let Some(z) = fields.get(4) {
        let adc_zero: i32 = z.parse().map_err(|_| malformed(line_no, format!("non-numeric ADC zero {z:?}")))?;
        baseline.get_or_insert(adc_zero);
    }
    for (idx, what) in [(3usize, "ADC resolution"), (5, "initial value"), (6, "checksum"), (7, "block size")] {
        if let Some(f) = fields.get(idx) {
            f.parse::<i64>().map_err(|_| malformed(line_no, format!("non-numeric {what} {f:?}")))?;
        }
    }
    let description = if fields.len() > 8 { fields[8..].join(" ") } else { String::new() };

    Ok(SignalSpec { file_name, format_code, gain, baseline: baseline.unwrap_or(0), units_label, description })
}

#[inline]
fn twos_complement_12(v: u16) -> i16 {
    if v & 0x800 != 0 {
        v as i16 - 0x1000
    } else {
        v as i16
    }
}

/// Number of bytes holding `total` format-212 samples.
pub fn format212_len(total: usize) -> usize {
    (total * 3).div_ceil(2)
}

/// Decodes interleaved format-212 data into one raw ADC row per signal.
///
/// Each byte triple `(b0, b1, b2)` carries two samples:
/// `A = ((b1 & 0x0F) << 8) | b0` and `B = ((b1 & 0xF0) << 4) | b2`, both
/// 12-bit two's complement. Samples are interleaved across signals in
/// acquisition order. A trailing pad sample (odd total) is ignored.
pub fn decode_format212(bytes: &[u8], n_samples: usize, n_signals: usize) -> Result<Vec<Vec<i16>>> {
    if n_signals == 0 {
        return Err(WfdbError::InvalidSignalCount(n_signals));
    }
    let total = n_samples.checked_mul(n_signals).ok_or(WfdbError::InvalidSignalCount(n_signals))?;
    let expected = format212_len(total);
    if bytes.len() < expected {
        return Err(WfdbError::TruncatedFile { expected, actual: bytes.len() });
    }

    let mut out = vec![Vec::with_capacity(n_samples); n_signals];
    for k in 0..total {
        let base = (k / 2) * 3;
        let raw = if k % 2 == 0 {
            ((bytes[base + 1] as u16 & 0x0F) << 8) | bytes[base] as u16
        } else {
            ((bytes[base + 1] as u16 & 0xF0) << 4) | bytes[base + 2] as u16
        };
        out[k % n_signals].push(twos_complement_12(raw));
    }
    Ok(out)
}

/// Packs raw ADC rows (one per signal, equal lengths) into format 212.
///
/// Inverse of [`decode_format212`]. Values are truncated to their low 12
/// bits. An odd total gets a zero pad sample.
pub fn encode_format212(signals: &[Vec<i16>]) -> Vec<u8> {
    let n_signals = signals.len();
    let n_samples = signals.first().map_or(0, Vec::len);
    let total = n_samples * n_signals;
    let mut out = Vec::with_capacity(format212_len(total) + 1);
    let sample = |k: usize| -> u16 {
        if k < total {
            (signals[k % n_signals][k / n_signals] as u16) & 0x0FFF
        } else {
            0
        }
    };
    let mut k = 0;
    while k < total {
        let a = sample(k);
        let b = sample(k + 1);
        out.push((a & 0xFF) as u8);
        out.push((((a >> 8) & 0x0F) | ((b >> 4) & 0xF0)) as u8);
        out.push((b & 0xFF) as u8);
        k += 2;
    }
    out
}

/// Converts raw ADC values to physical units: `(raw - baseline) / gain`.
pub fn to_physical(raw: &[i16], gain: f64, baseline: i32) -> Result<Vec<f64>> {
    if gain == 0.0 {
        return Err(WfdbError::ZeroGain);
    }
    Ok(raw.iter().map(|&r| (r as f64 - baseline as f64) / gain).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| WfdbError::Io { path: path.to_path_buf(), source })
}

/// Loads one channel of a record given the path to its `.hea` file.
///
/// The `.dat` file is resolved relative to the header's directory. All
/// signals sharing that file must be format 212, since they are interleaved.
pub fn load_record(header_path: impl AsRef<Path>, channel: usize) -> Result<SignalRecord> {
    let header_path = header_path.as_ref();
    let text = String::from_utf8_lossy(&read_file(header_path)?).into_owned();
    let mut header = parse_header(&text)?;
    if channel >= header.n_signals {
        return Err(WfdbError::ChannelOutOfRange { channel, n_signals: header.n_signals });
    }

    let file_name = header.signals[channel].file_name.clone();
    let group: Vec<usize> = (0..header.n_signals).filter(|&i| header.signals[i].file_name == file_name).collect();
    for &i in &group {
        let code = header.signals[i].format_code;
        if code != FORMAT_212 {
            return Err(WfdbError::UnsupportedFormat { code });
        }
    }
    let position = group.iter().position(|&i| i == channel).unwrap_or(0);

    let dat_path = header_path.parent().unwrap_or_else(|| Path::new(".")).join(&file_name);
    let bytes = read_file(&dat_path)?;
    if header.n_samples == 0 {
        header.n_samples = bytes.len() * 2 / 3 / group.len();
    }
    let mut rows = decode_format212(&bytes, header.n_samples, group.len())?;
    let raw = rows.swap_remove(position);
    let spec = &header.signals[channel];
    let samples_mv = to_physical(&raw, spec.gain, spec.baseline)?;

    Ok(SignalRecord { header, channel_index: channel, samples_mv, source_path: header_path.display().to_string() })
}

/// Writes a single-file format-212 record (`<name>.hea` + `<name>.dat`) from
/// physical-unit signals. Values are quantized with the given gain and a zero
/// baseline and clamped to the 12-bit range.
pub fn write_record(
    dir: impl AsRef<Path>,
    name: &str,
    sampling_rate: f64,
    gain: f64,
    signals_mv: &[Vec<f64>],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let n_samples = signals_mv.first().map_or(0, Vec::len);
    let raw: Vec<Vec<i16>> = signals_mv
        .iter()
        .map(|s| s.iter().map(|v| (v * gain).round().clamp(-2048.0, 2047.0) as i16).collect())
        .collect();
    let dat_name = format!("{name}.dat");
    let mut hea = format!("{name} {} {sampling_rate} {n_samples}\n", signals_mv.len());
    for (i, row) in raw.iter().enumerate() {
        let first = row.first().copied().unwrap_or(0);
        hea.push_str(&format!("{dat_name} 212 {gain}(0)/mV 12 0 {first} 0 0 sig{i}\n"));
    }
    let io = |path: PathBuf, source| WfdbError::Io { path, source };
    let dat_path = dir.join(&dat_name);
    fs::write(&dat_path, encode_format212(&raw)).map_err(|e| io(dat_path.clone(), e))?;
    let hea_path = dir.join(format!("{name}.hea"));
    fs::write(&hea_path, hea).map_err(|e| io(hea_path.clone(), e))?;
    Ok(hea_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER_100: &str = "100 2 360 650000\n\
        100.dat 212 200 11 1024 995 -22131 0 MLII\n\
        100.dat 212 200 11 1024 1011 20052 0 V5\n\
        # 69 M 1085 1629 x1\n\
        # Aldomet, Inderal\n";

    #[test]
    fn parses_mitbih_record_line() {
        let h = parse_header(HEADER_100).unwrap();
        assert_eq!(h.record_name, "100");
        assert_eq!(h.n_signals, 2);
        assert_eq!(h.sampling_rate, 360.0);
        assert_eq!(h.n_samples, 650000);
        assert_eq!(h.signals[0].gain, 200.0);
        assert_eq!(h.signals[0].baseline, 1024);
        assert_eq!(h.signals[0].format_code, 212);
        assert_eq!(h.signals[0].description, "MLII");
        assert_eq!(h.signals[1].description, "V5");
    }

    #[test]
    fn baseline_in_parentheses_and_units() {
        let h = parse_header("x 1 250\nx.dat 212 100(12)/uV 12 0 0 0 0 lead I\n").unwrap();
        assert_eq!(h.signals[0].gain, 100.0);
        assert_eq!(h.signals[0].baseline, 12);
        assert_eq!(h.signals[0].units_label, "uV");
        assert_eq!(h.signals[0].description, "lead I");
        assert_eq!(h.n_samples, 0);
    }

    #[test]
    fn absent_baseline_is_zero() {
        let h = parse_header("bw 1 360 10\nbw.dat 212 200\n").unwrap();
        assert_eq!(h.signals[0].baseline, 0);
    }

    #[test]
    fn header_errors() {
        assert!(matches!(parse_header(""), Err(WfdbError::MalformedHeader { .. })));
        assert!(matches!(parse_header("# only comments\n"), Err(WfdbError::MalformedHeader { .. })));
        assert!(matches!(parse_header("100 two 360\n"), Err(WfdbError::MalformedHeader { line: 1, .. })));
        match parse_header("100 1 360 10\n100.dat 212 abc\n") {
            Err(WfdbError::MalformedHeader { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_header("100 2 360 10\n100.dat 212 200\n"), Err(WfdbError::MalformedHeader { .. })));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_format212(&[0xE8, 0x03, 0x00], 2, 1).unwrap(), vec![vec![1000, 0]]);
        assert_eq!(decode_format212(&[0xFF, 0x0F, 0x00], 2, 1).unwrap(), vec![vec![-1, 0]]);
        assert_eq!(decode_format212(&[0, 0, 0], 2, 1).unwrap(), vec![vec![0, 0]]);
    }

    #[test]
    fn decode_interleaves_signals_and_drops_pad() {
        // Two signals, one sample each: A belongs to signal 0, B to signal 1.
        let rows = decode_format212(&[0x01, 0x20, 0x03], 1, 2).unwrap();
        assert_eq!(rows, vec![vec![1], vec![0x203]]);
        // Three samples of one signal: second triple carries a pad.
        let rows = decode_format212(&[1, 0, 2, 3, 0, 0xAA], 3, 1).unwrap();
        assert_eq!(rows, vec![vec![1, 2, 3]]);
        // Only ceil(1.5 * 3) = 5 bytes are required.
        assert!(decode_format212(&[1, 0, 2, 3, 0], 3, 1).is_ok());
    }

    #[test]
    fn truncated_input() {
        assert!(matches!(
            decode_format212(&[0xE8, 0x03], 2, 1),
            Err(WfdbError::TruncatedFile { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn physical_conversion() {
        assert_eq!(to_physical(&[1024], 200.0, 1024).unwrap(), vec![0.0]);
        assert_eq!(to_physical(&[1224], 200.0, 1024).unwrap(), vec![1.0]);
        assert!(matches!(to_physical(&[0], 0.0, 0), Err(WfdbError::ZeroGain)));
    }

    proptest! {
        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64),
                               n in 0usize..50, sigs in 1usize..3) {
            if let Ok(rows) = decode_format212(&bytes, n, sigs) {
                for row in rows {
                    prop_assert_eq!(row.len(), n);
                    prop_assert!(row.iter().all(|v| (-2048..=2047).contains(v)));
                }
            }
        }

        #[test]
        fn encode_decode_round_trip(triples in proptest::collection::vec(any::<[u8; 3]>(), 0..40)) {
            let bytes: Vec<u8> = triples.concat();
            let total = bytes.len() / 3 * 2;
            let rows = decode_format212(&bytes, total, 1).unwrap();
            prop_assert_eq!(encode_format212(&rows), bytes);
        }

        #[test]
        fn parse_is_pure(gain in 1u32..1000, base in -2048i32..2047) {
            let text = format!("r 1 360 5\nr.dat 212 {gain}({base}) 12 0\n");
            prop_assert_eq!(parse_header(&text).unwrap(), parse_header(&text).unwrap());
        }
    }

    #[test]
    fn load_record_round_trip_and_channel_check() {
        let dir = tempfile::tempdir().unwrap();
        let sig0: Vec<f64> = (0..101).map(|i| (i as f64 * 0.1).sin()).collect();
        let sig1: Vec<f64> = (0..101).map(|i| -(i as f64) * 0.01).collect();
        let hea = write_record(dir.path(), "rec", 360.0, 200.0, &[sig0.clone(), sig1]).unwrap();
        let r = load_record(&hea, 0).unwrap();
        assert_eq!(r.len(), 101);
        assert_eq!(r.header.n_samples, 101);
        assert_eq!(r.header.sampling_rate, 360.0);
        for (a, b) in r.samples_mv.iter().zip(&sig0) {
            assert!((a - b).abs() <= 0.5 / 200.0 + 1e-12);
        }
        assert!(matches!(load_record(&hea, 5), Err(WfdbError::ChannelOutOfRange { channel: 5, n_signals: 2 })));
    }

    #[test]
    fn load_rejects_other_formats() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.hea"), "r 1 360 2\nr.dat 16 200 16 0\n").unwrap();
        std::fs::write(dir.path().join("r.dat"), [0u8; 4]).unwrap();
        assert!(matches!(load_record(dir.path().join("r.hea"), 0), Err(WfdbError::UnsupportedFormat { code: 16 })));
    }
}
