use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};

pub const METRICS_CSV_HEADER: &str = "record_id,noise_kind,input_snr_db,snr_out_db,snr_imp_db,mse,rmse,prd_percent";

/// Mean of squares.
pub fn signal_power(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

fn check_pair(f: &[f64], u: &[f64]) -> Result<()> {
    if f.len() != u.len() {
        return Err(PipelineError::LengthMismatch(f.len(), u.len()));
    }
    if f.is_empty() {
        return Err(PipelineError::EmptyInput);
    }
    Ok(())
}

fn sums(f: &[f64], u: &[f64]) -> (f64, f64) {
    f.iter().zip(u).fold((0.0, 0.0), |(sf, se), (a, b)| {
        let e = a - b;
        (sf + a * a, se + e * e)
    })
}

/// Output SNR in dB: `10 log10(sum f^2 / sum (f - u)^2)`.
/// Returns `f64::INFINITY` when the residual is exactly zero.
pub fn snr_out(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(clean, estimate)?;
    let (sf, se) = sums(clean, estimate);
    if sf == 0.0 {
        return Err(PipelineError::ZeroPowerClean);
    }
    if se == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (sf / se).log10())
}

/// `snr_out(clean, estimate) - snr_out(clean, noisy)`.
pub fn snr_improvement(clean: &[f64], noisy: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(clean, noisy)?;
    let after = snr_out(clean, estimate)?;
    let before = snr_out(clean, noisy)?;
    if after == before {
        return Ok(0.0);
    }
    Ok(after - before)
}

pub fn mse(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(clean, estimate)?;
    Ok(sums(clean, estimate).1 / clean.len() as f64)
}

pub fn rmse(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    mse(clean, estimate).map(f64::sqrt)
}

/// Percent root-mean-square difference, `100 sqrt(sum e^2 / sum f^2)`
/// (no mean subtraction).
pub fn prd(clean: &[f64], estimate: &[f64]) -> Result<f64> {
    check_pair(clean, estimate)?;
    let (sf, se) = sums(clean, estimate);
    if sf == 0.0 {
        return Err(PipelineError::ZeroPowerClean);
    }
    Ok(100.0 * (se / sf).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub record_id: String,
    pub noise_kind: String,
    pub input_snr_db: f64,
    pub snr_out_db: f64,
    pub snr_imp_db: f64,
    pub mse: f64,
    pub rmse: f64,
    pub prd_percent: f64,
}

impl MetricsRow {
    /// Computes every metric for one (clean, noisy, estimate) triple.
    pub fn compute(
        record_id: &str,
        noise_kind: &str,
        input_snr_db: f64,
        clean: &[f64],
        noisy: &[f64],
        estimate: &[f64],
    ) -> Result<Self> {
        let mse = mse(clean, estimate)?;
        Ok(Self {
            record_id: record_id.to_string(),
            noise_kind: noise_kind.to_string(),
            input_snr_db,
            snr_out_db: snr_out(clean, estimate)?,
            snr_imp_db: snr_improvement(clean, noisy, estimate)?,
            mse,
            rmse: mse.sqrt(),
            prd_percent: prd(clean, estimate)?,
        })
    }
}

/// Arithmetic means of the rows sharing a (noise kind, input SNR).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsAggregate {
    pub noise_kind: String,
    pub input_snr_db: f64,
    pub n_rows: usize,
    pub snr_out_db: f64,
    pub snr_imp_db: f64,
    pub mse: f64,
    pub rmse: f64,
    pub prd_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub aggregates: Vec<MetricsAggregate>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<MetricsRow>) -> Self {
        let mut groups: BTreeMap<(String, u64), Vec<&MetricsRow>> = BTreeMap::new();
        for r in &rows {
            // Order key: kind label, then SNR (non-negative levels sort by bits).
            groups.entry((r.noise_kind.clone(), ordered_bits(r.input_snr_db))).or_default().push(r);
        }
        let aggregates = groups
            .into_values()
            .map(|members| {
                let n = members.len() as f64;
                let mean = |f: fn(&MetricsRow) -> f64| members.iter().map(|r| f(r)).sum::<f64>() / n;
                MetricsAggregate {
                    noise_kind: members[0].noise_kind.clone(),
                    input_snr_db: members[0].input_snr_db,
                    n_rows: members.len(),
                    snr_out_db: mean(|r| r.snr_out_db),
                    snr_imp_db: mean(|r| r.snr_imp_db),
                    mse: mean(|r| r.mse),
                    rmse: mean(|r| r.rmse),
                    prd_percent: mean(|r| r.prd_percent),
                }
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn write_rows_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv(w, &self.rows)
    }

    pub fn write_aggregates_csv<W: Write>(&self, w: W) -> Result<()> {
        write_csv(w, &self.aggregates)
    }

    /// Reads a row CSV (schema [`METRICS_CSV_HEADER`]) and recomputes aggregates.
    pub fn read_rows_csv<R: Read>(r: R) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers().map_err(csv_err)?.iter().collect::<Vec<_>>().join(",");
        if header != METRICS_CSV_HEADER {
            return Err(PipelineError::Format(format!("unexpected metrics header {header:?}")));
        }
        let rows = reader.deserialize().collect::<std::result::Result<Vec<MetricsRow>, _>>().map_err(csv_err)?;
        Ok(Self::from_rows(rows))
    }

    /// Pivot in the layout of a results table: one line per record, one
    /// column per input SNR, for the given metric.
    pub fn pivot(&self, metric: fn(&MetricsRow) -> f64) -> Vec<(String, String, BTreeMap<u64, f64>)> {
        let mut table: BTreeMap<(String, String), BTreeMap<u64, f64>> = BTreeMap::new();
        for r in &self.rows {
            table
                .entry((r.noise_kind.clone(), r.record_id.clone()))
                .or_default()
                .insert(ordered_bits(r.input_snr_db), metric(r));
        }
        table.into_iter().map(|((k, rec), cols)| (k, rec, cols)).collect()
    }
}

/// Total-order key for finite SNR levels.
pub(crate) fn ordered_bits(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Format(e.to_string())
}

fn write_csv<W: Write, T: Serialize>(w: W, items: &[T]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    for item in items {
        writer.serialize(item).map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn snr_hand_cases() {
        assert_eq!(snr_out(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), f64::INFINITY);
        assert!((snr_out(&[3.0, 4.0], &[8.0, 4.0]).unwrap() - 0.0).abs() < 1e-12);
        assert!((snr_out(&[3.0, 4.0], &[3.5, 4.0]).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(snr_out(&[1.0], &[1.0, 2.0]), Err(PipelineError::LengthMismatch(1, 2))));
    }

    #[test]
    fn error_metric_hand_cases() {
        let f = [1.0, 2.0, 3.0];
        let u = [0.0, 2.0, 3.0];
        assert!((mse(&f, &u).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((rmse(&f, &u).unwrap() - 0.577_350_269_189_625_8).abs() < 1e-12);
        assert_eq!(mse(&f, &f).unwrap(), 0.0);
        assert_eq!(rmse(&f, &f).unwrap(), 0.0);
        assert_eq!(prd(&f, &f).unwrap(), 0.0);
        assert!((prd(&[3.0, 4.0], &[8.0, 4.0]).unwrap() - 100.0).abs() < 1e-12);
        assert!(matches!(prd(&[0.0, 0.0], &[1.0, 0.0]), Err(PipelineError::ZeroPowerClean)));
    }

    #[test]
    fn improvement_cases() {
        let c = [1.0, -2.0, 0.5];
        let n = [1.3, -2.2, 0.1];
        assert_eq!(snr_improvement(&c, &n, &n).unwrap(), 0.0);
        assert_eq!(snr_improvement(&c, &n, &c).unwrap(), f64::INFINITY);
        let e = [1.1, -2.1, 0.4];
        let expected = snr_out(&c, &e).unwrap() - snr_out(&c, &n).unwrap();
        assert_eq!(snr_improvement(&c, &n, &e).unwrap(), expected);
    }

    proptest! {
        #[test]
        fn rmse_squared_is_mse(pairs in proptest::collection::vec((-10f64..10.0, -10f64..10.0), 1..100)) {
            let (f, u): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let m = mse(&f, &u).unwrap();
            let r = rmse(&f, &u).unwrap();
            prop_assert!((r * r - m).abs() <= 1e-12 * m.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn improvement_is_exactly_zero_for_identity(pairs in proptest::collection::vec((0.1f64..10.0, -1f64..1.0), 1..50)) {
            let f: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let n: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            prop_assert_eq!(snr_improvement(&f, &n, &n).unwrap(), 0.0);
        }
    }

    #[test]
    fn aggregates_are_row_means_and_csv_round_trips() {
        let row = |rec: &str, kind: &str, snr: f64, v: f64| MetricsRow {
            record_id: rec.into(),
            noise_kind: kind.into(),
            input_snr_db: snr,
            snr_out_db: v,
            snr_imp_db: v - snr,
            mse: v / 100.0,
            rmse: (v / 100.0).sqrt(),
            prd_percent: v * 2.0,
        };
        let report = MetricsReport::from_rows(vec![
            row("100", "awgn", 5.0, 10.0),
            row("101", "awgn", 5.0, 14.0),
            row("100", "awgn", 15.0, 20.0),
            row("100", "em", 1.25, 3.0),
        ]);
        assert_eq!(report.aggregates.len(), 3);
        let a = &report.aggregates[0];
        assert_eq!((a.noise_kind.as_str(), a.input_snr_db, a.n_rows), ("awgn", 5.0, 2));
        assert_eq!(a.snr_out_db, 12.0);
        assert_eq!(a.prd_percent, 24.0);

        let mut buf = Vec::new();
        report.write_rows_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(METRICS_CSV_HEADER));
        let back = MetricsReport::read_rows_csv(buf.as_slice()).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn snr_ordering_key() {
        let mut v = vec![15.0, -3.0, 0.0, 1.25, 5.0];
        v.sort_by_key(|x| ordered_bits(*x));
        assert_eq!(v, vec![-3.0, 0.0, 1.25, 5.0, 15.0]);
    }
}
