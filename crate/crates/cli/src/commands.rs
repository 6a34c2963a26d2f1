use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use serde::Serialize;
use serde_json::json;

use ascnet::model::ModelConfig;
use ascnet::pipeline::synth::synthetic_records;
use ascnet::pipeline::{
    build_dataset, mix_noise, read_segment_set, write_segment_set, MetricsReport, MetricsRow, NoiseKind, NoiseSources,
    NoiseSpec, SegmentSet, SplitFractions, METRICS_CSV_HEADER,
};
use ascnet::trainer::{
    denoise_record, evaluate, load_checkpoint, resume, save_checkpoint, Checkpoint, Method, TrainConfig,
};
use ascnet::util::write_atomic;
use ascnet::wfdb::{load_record, SignalRecord};

use crate::args::{DenoiseArgs, EvalArgs, PrepareArgs, ReportArgs, Stub, TrainArgs};
use crate::exit::{fail, CliError, WithCode, BAD_ARGS, PARSE, SCHEMA_MISMATCH};
use crate::manifest::{RunManifest, MANIFEST_FILE};

const SPLITS: [&str; 3] = ["train", "val", "test"];
const SYNTHETIC_SECONDS: f64 = 120.0;
const SYNTHETIC_FS: f64 = 360.0;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).code(BAD_ARGS, || format!("cannot create {}", dir.display()))
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).code(BAD_ARGS, || format!("cannot write {}", path.display()))
}

/// Manifest path for a command whose output is a single file.
fn sidecar_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_wfdb(path: &Path, channel: usize) -> Result<SignalRecord, CliError> {
    load_record(path, channel).map_err(|e| {
        let mut err = CliError::from(e);
        err.error = err.error.context(format!("reading {}", path.display()));
        err
    })
}

fn record_headers(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.is_dir() {
        return fail(BAD_ARGS, format!("records directory {} does not exist", dir.display()));
    }
    let mut headers: Vec<PathBuf> = fs::read_dir(dir)
        .code(BAD_ARGS, || format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "hea"))
        .collect();
    headers.sort();
    if headers.is_empty() {
        return fail(BAD_ARGS, format!("no .hea files in {}", dir.display()));
    }
    Ok(headers)
}

fn hash_record_files(m: &mut RunManifest, header: &Path) -> Result<(), CliError> {
    m.hash_input(header).code(BAD_ARGS, || format!("cannot hash {}", header.display()))?;
    let dat = header.with_extension("dat");
    if dat.exists() {
        m.hash_input(&dat).code(BAD_ARGS, || format!("cannot hash {}", dat.display()))?;
    }
    Ok(())
}

fn family_name(kind: &NoiseKind, snr: f64) -> String {
    format!("{kind}_snr{snr}")
}

pub fn prepare(a: &PrepareArgs) -> Result<(), CliError> {
    let kinds = a
        .noise
        .iter()
        .map(|s| s.trim().parse::<NoiseKind>())
        .collect::<Result<Vec<_>, _>>()
        .code(BAD_ARGS, || "bad --noise".into())?;
    if let Some(bad) = a.snr.iter().find(|s| !s.is_finite()) {
        return fail(BAD_ARGS, format!("bad --snr value {bad}"));
    }
    if a.split.len() != 3 {
        return fail(BAD_ARGS, format!("--split needs three fractions, got {}", a.split.len()));
    }
    let fractions = SplitFractions { train: a.split[0], val: a.split[1], test: a.split[2] };

    let mut inputs = RunManifest::new("prepare", json!(null));
    let (records, record_names): (Vec<SignalRecord>, Vec<String>) = match (&a.records, a.synthetic) {
        (_, Some(n)) => {
            let recs = synthetic_records(n, SYNTHETIC_SECONDS, SYNTHETIC_FS, a.seed);
            let names = recs.iter().map(|r| r.name().to_string()).collect();
            (recs, names)
        }
        (Some(dir), None) => {
            let mut recs = Vec::new();
            for h in record_headers(dir)? {
                recs.push(load_wfdb(&h, a.channel)?);
                hash_record_files(&mut inputs, &h)?;
            }
            let names = recs.iter().map(|r| r.name().to_string()).collect();
            (recs, names)
        }
        (None, None) => return fail(BAD_ARGS, "--records or --synthetic is required"),
    };

    let mut sources = NoiseSources::new();
    let needed: BTreeSet<NoiseKind> =
        kinds.iter().flat_map(|k| k.components()).filter(NoiseKind::needs_source).collect();
    for base in needed {
        let name = base.record_name().expect("recorded noise has a record name");
        let Some(dir) = &a.noise_dir else {
            return fail(
                PARSE,
                format!("noise record '{name}' needed for --noise {base}, but no --noise-dir was given"),
            );
        };
        let header = dir.join(format!("{name}.hea"));
        if !header.exists() {
            return fail(PARSE, format!("noise record '{name}' not found (expected {})", header.display()));
        }
        let rec = load_record(&header, 0).map_err(|e| {
            CliError::new(PARSE, anyhow::Error::new(e).context(format!("reading noise record '{name}'")))
        })?;
        hash_record_files(&mut inputs, &header)?;
        sources.insert(base, Arc::new(rec));
    }

    create_dir(&a.out)?;
    let mut families = Vec::new();
    for kind in &kinds {
        for &snr in &a.snr {
            let spec = NoiseSpec { kind: kind.clone(), target_snr_db: snr, sources: sources.clone(), seed: a.seed };
            let splits = build_dataset(&records, &[spec], a.length, a.stride, fractions, a.seed)?;
            let family = family_name(kind, snr);
            let dir = a.out.join(&family);
            create_dir(&dir)?;
            let mut counts = serde_json::Map::new();
            for (name, set) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
                write_segment_set(set, dir.join(format!("{name}.bin")))?;
                counts.insert(name.to_string(), json!({ "segments": set.len(), "records": set.record_ids() }));
            }
            let mut m = inputs.clone();
            m.config = json!({
                "noise": kind.to_string(),
                "snr_db": snr,
                "segment_length": a.length,
                "stride": a.stride,
                "split": fractions,
                "channel": a.channel,
                "records": record_names,
                "synthetic": a.synthetic,
                "sets": counts,
            });
            m.seeds.insert("dataset".into(), a.seed);
            m.write(&dir.join(MANIFEST_FILE)).code(BAD_ARGS, || "writing manifest".into())?;
            families.push(family);
        }
    }
    let mut root = inputs;
    root.config = json!({ "families": families, "records": record_names });
    root.seeds.insert("dataset".into(), a.seed);
    root.write(&a.out.join(MANIFEST_FILE)).code(BAD_ARGS, || "writing manifest".into())?;
    println!("wrote {} dataset families to {}", families.len(), a.out.display());
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).code(BAD_ARGS, || format!("cannot read {}", path.display()))?;
    serde_json::from_slice(&bytes).code(PARSE, || format!("parsing {}", path.display()))
}

fn read_split(dir: &Path, split: &str) -> Result<(SegmentSet, PathBuf), CliError> {
    if !dir.is_dir() {
        return fail(BAD_ARGS, format!("data directory {} does not exist", dir.display()));
    }
    let path = dir.join(format!("{split}.bin"));
    if !path.exists() {
        return fail(BAD_ARGS, format!("{} not found", path.display()));
    }
    let set = read_segment_set(&path).map_err(|e| {
        let mut err = CliError::from(e);
        err.error = err.error.context(format!("reading {}", path.display()));
        err
    })?;
    Ok((set, path))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let (train_set, train_path) = read_split(&a.data, "train")?;
    let (val_set, val_path) = read_split(&a.data, "val")?;

    let mut manifest = RunManifest::new("train", json!(null));
    for p in [&train_path, &val_path] {
        manifest.hash_input(p).code(BAD_ARGS, || "hashing inputs".into())?;
    }

    let start = match &a.resume {
        Some(path) => {
            manifest.hash_input(path).code(BAD_ARGS, || format!("cannot read {}", path.display()))?;
            load_checkpoint(path).map_err(|e| {
                let mut err = CliError::from(e);
                err.error = err.error.context(format!("loading {}", path.display()));
                err
            })?
        }
        None => {
            let model_cfg: ModelConfig = match &a.model_config {
                Some(p) => {
                    manifest.config_files.push(p.display().to_string());
                    read_json(p)?
                }
                None if a.micro => ModelConfig { segment_length: train_set.length, ..ModelConfig::micro() },
                None => ModelConfig::default(),
            };
            let mut tc: TrainConfig = match &a.train_config {
                Some(p) => {
                    manifest.config_files.push(p.display().to_string());
                    read_json(p)?
                }
                None => TrainConfig::default(),
            };
            if let Some(v) = a.epochs {
                tc.max_epochs = v;
            }
            if let Some(v) = a.batch_size {
                tc.batch_size = v;
            }
            if let Some(v) = a.lr {
                tc.learning_rate = v;
            }
            if let Some(v) = a.seed {
                tc.seed = v;
            }
            if let Some(v) = a.init_seed {
                tc.init_seed = v;
            }
            if let Some(v) = a.patience {
                tc.early_stop_patience = v;
            }
            Checkpoint::new(&model_cfg, &tc)?
        }
    };
    let max_epochs = a.epochs.unwrap_or(start.train_config.max_epochs);
    let ckpt = resume(start, &train_set, &val_set, max_epochs)?;

    create_dir(&a.out)?;
    save_checkpoint(&ckpt, a.out.join("checkpoint.bin"))?;
    let csv = csv_bytes(&ckpt.history).code(BAD_ARGS, || "writing loss history".into())?;
    write_file(&a.out.join("loss_history.csv"), &csv)?;

    manifest.config = json!({
        "data": a.data.display().to_string(),
        "model": ckpt.model_config,
        "train": ckpt.train_config,
        "resumed_from": a.resume.as_ref().map(|p| p.display().to_string()),
        "epochs_completed": ckpt.epoch,
        "best_epoch": ckpt.best_epoch,
        "stopped_early": ckpt.stopped_early,
    });
    manifest.seeds.insert("shuffle".into(), ckpt.train_config.seed);
    manifest.seeds.insert("init".into(), ckpt.train_config.init_seed);
    manifest.write(&a.out.join(MANIFEST_FILE)).code(BAD_ARGS, || "writing manifest".into())?;
    if let Some(last) = ckpt.history.last() {
        println!(
            "epoch {}: train loss {:.6}, val loss {:.6} (best epoch {:?})",
            last.epoch, last.train_loss, last.val_loss, ckpt.best_epoch
        );
    }
    Ok(())
}

type Metric = fn(&MetricsRow) -> f64;

/// One line per (noise kind, record), one column per input SNR.
fn pivot_csv(rows: &[MetricsRow], metric: Metric) -> anyhow::Result<Vec<u8>> {
    let mut levels: Vec<f64> = rows.iter().map(|r| r.input_snr_db).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut keys: Vec<(&str, &str)> = rows.iter().map(|r| (r.noise_kind.as_str(), r.record_id.as_str())).collect();
    keys.sort();
    keys.dedup();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["noise_kind".to_string(), "record_id".to_string()];
    header.extend(levels.iter().map(|l| format!("snr_{l}")));
    w.write_record(&header)?;
    for (kind, rec) in keys {
        let mut line = vec![kind.to_string(), rec.to_string()];
        for l in &levels {
            let v = rows
                .iter()
                .find(|r| r.noise_kind == kind && r.record_id == rec && r.input_snr_db == *l)
                .map(|r| metric(r).to_string());
            line.push(v.unwrap_or_default());
        }
        w.write_record(&line)?;
    }
    Ok(w.into_inner()?)
}

fn merge_sets(sets: Vec<SegmentSet>) -> Result<SegmentSet, CliError> {
    let mut iter = sets.into_iter();
    let mut merged = iter.next().expect("at least one data dir");
    for s in iter {
        if s.length != merged.length {
            return fail(BAD_ARGS, format!("segment lengths differ: {} vs {}", s.length, merged.length));
        }
        merged.segments.extend(s.segments);
    }
    Ok(merged)
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let mut manifest = RunManifest::new("eval", json!(null));
    let mut sets = Vec::new();
    for dir in &a.data {
        let (set, path) = read_split(dir, &a.split)?;
        manifest.hash_input(&path).code(BAD_ARGS, || "hashing inputs".into())?;
        sets.push(set);
    }
    let set = merge_sets(sets)?;

    let ckpt = match (&a.checkpoint, a.stub) {
        (Some(path), None) => {
            manifest.hash_input(path).code(BAD_ARGS, || format!("cannot read {}", path.display()))?;
            Some(load_checkpoint(path)?)
        }
        _ => None,
    };
    let method = match (a.stub, &ckpt) {
        (Some(Stub::Clean), _) => Method::CleanStub,
        (Some(Stub::Noisy), _) => Method::NoisyStub,
        (None, Some(c)) => Method::Model { config: &c.model_config, params: &c.best_params },
        (None, None) => return fail(BAD_ARGS, "--checkpoint or --stub is required"),
    };
    let label = a.label.clone().unwrap_or_else(|| match a.stub {
        Some(Stub::Clean) => "stub-clean".into(),
        Some(Stub::Noisy) => "stub-noisy".into(),
        None => "ascnet".into(),
    });
    let report = evaluate(&method, &set)?;

    create_dir(&a.out)?;
    let rows = csv_bytes(&report.rows).code(BAD_ARGS, || "metrics csv".into())?;
    write_file(&a.out.join("metrics.csv"), &rows)?;
    let aggs = csv_bytes(&report.aggregates).code(BAD_ARGS, || "aggregates csv".into())?;
    write_file(&a.out.join("aggregates.csv"), &aggs)?;
    let tables: [(&str, Metric); 3] =
        [("snr_out_db", |r| r.snr_out_db), ("snr_imp_db", |r| r.snr_imp_db), ("rmse", |r| r.rmse)];
    for (name, f) in tables {
        let csv = pivot_csv(&report.rows, f).code(BAD_ARGS, || "table csv".into())?;
        write_file(&a.out.join(format!("table_{name}.csv")), &csv)?;
    }
    manifest.config = json!({
        "label": label,
        "data": a.data.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "split": a.split,
        "stub": a.stub.map(|s| format!("{s:?}").to_lowercase()),
        "checkpoint": a.checkpoint.as_ref().map(|p| p.display().to_string()),
        "model": ckpt.as_ref().map(|c| &c.model_config),
        "best_epoch": ckpt.as_ref().and_then(|c| c.best_epoch),
    });
    manifest.write(&a.out.join(MANIFEST_FILE)).code(BAD_ARGS, || "writing manifest".into())?;
    for agg in &report.aggregates {
        println!(
            "{} @ {} dB: snr_out {:.3} dB, snr_imp {:.3} dB, rmse {:.4} ({} records)",
            agg.noise_kind, agg.input_snr_db, agg.snr_out_db, agg.snr_imp_db, agg.rmse, agg.n_rows
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct DenoisedSample {
    sample_index: usize,
    input_mv: f64,
    denoised_mv: f64,
}

pub fn denoise(a: &DenoiseArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.checkpoint).map_err(CliError::from).map_err(|mut e| {
        e.error = e.error.context(format!("loading {}", a.checkpoint.display()));
        e
    })?;
    let header = if a.record.extension().is_some_and(|e| e == "hea") {
        a.record.clone()
    } else {
        let mut p = a.record.clone().into_os_string();
        p.push(".hea");
        PathBuf::from(p)
    };
    let record = load_wfdb(&header, a.channel)?;
    let input = match a.add_awgn_snr {
        Some(snr) => mix_noise(&record.samples_mv, &NoiseSpec::awgn(snr, a.seed))?,
        None => record.samples_mv.clone(),
    };
    let denoised = denoise_record(&ckpt.model_config, &ckpt.best_params, &input)?;
    let rows: Vec<DenoisedSample> = input
        .iter()
        .zip(&denoised)
        .enumerate()
        .map(|(i, (x, y))| DenoisedSample { sample_index: i, input_mv: *x, denoised_mv: *y })
        .collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.out, &csv_bytes(&rows).code(BAD_ARGS, || "denoised csv".into())?)?;

    let mut m = RunManifest::new("denoise", json!(null));
    m.hash_input(&a.checkpoint).code(BAD_ARGS, || "hashing inputs".into())?;
    hash_record_files(&mut m, &header)?;
    m.config = json!({
        "record": header.display().to_string(),
        "channel": a.channel,
        "add_awgn_snr": a.add_awgn_snr,
        "segment_length": ckpt.model_config.segment_length,
        "overlap": 0.5,
        "weights": "triangular",
    });
    if a.add_awgn_snr.is_some() {
        m.seeds.insert("awgn".into(), a.seed);
    }
    m.write(&sidecar_manifest(&a.out)).code(BAD_ARGS, || "writing manifest".into())?;
    println!("denoised {} samples of {}", rows.len(), record.name());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct ReportRow {
    method: String,
    noise_kind: String,
    input_snr_db: f64,
    record_id: String,
    snr_out_db: f64,
    snr_imp_db: f64,
    mse: f64,
    rmse: f64,
    prd_percent: f64,
}

fn eval_label(dir: &Path) -> String {
    let from_manifest = RunManifest::read(&dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|m| m.config.get("label").and_then(|l| l.as_str()).map(str::to_string));
    from_manifest
        .unwrap_or_else(|| dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into()))
}

pub fn report(a: &ReportArgs) -> Result<(), CliError> {
    if a.eval.is_empty() {
        return fail(BAD_ARGS, "no --eval directories given");
    }
    let mut manifest = RunManifest::new("report", json!(null));
    let mut rows: Vec<ReportRow> = Vec::new();
    for dir in &a.eval {
        let path = dir.join("metrics.csv");
        let text = fs::read_to_string(&path).code(BAD_ARGS, || format!("cannot read {}", path.display()))?;
        let header = text.lines().next().unwrap_or_default().trim_end_matches('\r');
        if header != METRICS_CSV_HEADER {
            return fail(
                SCHEMA_MISMATCH,
                format!("{}: header {header:?} does not match {METRICS_CSV_HEADER:?}", path.display()),
            );
        }
        let parsed = MetricsReport::read_rows_csv(text.as_bytes())
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(|e| CliError::new(SCHEMA_MISMATCH, e))?;
        manifest.hash_input(&path).code(BAD_ARGS, || "hashing inputs".into())?;
        let label = eval_label(dir);
        rows.extend(parsed.rows.into_iter().map(|r| ReportRow {
            method: label.clone(),
            noise_kind: r.noise_kind,
            input_snr_db: r.input_snr_db,
            record_id: r.record_id,
            snr_out_db: r.snr_out_db,
            snr_imp_db: r.snr_imp_db,
            mse: r.mse,
            rmse: r.rmse,
            prd_percent: r.prd_percent,
        }));
    }
    // Stable sort keeps the first occurrence of each key first; dedup drops the rest.
    rows.sort_by(|x, y| {
        (&x.method, &x.noise_kind)
            .cmp(&(&y.method, &y.noise_kind))
            .then(x.input_snr_db.total_cmp(&y.input_snr_db))
            .then(x.record_id.cmp(&y.record_id))
    });
    rows.dedup_by(|b, a| {
        a.method == b.method
            && a.noise_kind == b.noise_kind
            && a.input_snr_db == b.input_snr_db
            && a.record_id == b.record_id
    });
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_file(&a.out, &csv_bytes(&rows).code(BAD_ARGS, || "report csv".into())?)?;
    manifest.config = json!({
        "eval": a.eval.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "rows": rows.len(),
    });
    manifest.write(&sidecar_manifest(&a.out)).code(BAD_ARGS, || "writing manifest".into())?;
    println!("merged {} rows into {}", rows.len(), a.out.display());
    Ok(())
}
