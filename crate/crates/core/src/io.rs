//! File formats: CSV tables with JSON sidecars, and JSON model files.
//!
//! Every writer goes through [`write_atomic`], so readers never observe a
//! partially written file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rustfft::num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::boucwen::{Dataset, Split};
use crate::decouple::SweepReport;
use crate::error::{misconfig, Error, Result};
use crate::linid::FrfEstimate;
use crate::signals::{Signal, SignalSource};
use crate::sim::TrainReport;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| misconfig(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// `data.csv` → `data.json`
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn read_columns(path: &Path, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if found != header {
        return Err(misconfig(format!(
            "{}: expected columns {:?}, found {:?}",
            path.display(),
            header,
            found
        )));
    }
    let mut cols = vec![Vec::new(); header.len()];
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        for (c, field) in cols.iter_mut().zip(rec.iter()) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| misconfig(format!("{}: row {}: '{field}' is not a number", path.display(), line + 1)))?;
            c.push(v);
        }
    }
    Ok(cols)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSidecar {
    pub sampling_frequency: f64,
    pub sample_count: usize,
    pub source: SignalSource,
}

/// Two columns `time_s, value` plus a sidecar with the generating spec.
pub fn write_signal(path: &Path, signal: &Signal) -> Result<()> {
    let rows = signal
        .times()
        .zip(&signal.samples)
        .map(|(t, v)| vec![fmt(t), fmt(*v)]);
    write_atomic(path, &csv_bytes(&["time_s", "value"], rows)?)?;
    write_json(
        &sidecar_path(path),
        &SignalSidecar {
            sampling_frequency: signal.sampling_frequency,
            sample_count: signal.len(),
            source: signal.source.clone(),
        },
    )
}

pub fn read_signal(path: &Path) -> Result<Signal> {
    let meta: SignalSidecar = read_json(&sidecar_path(path))?;
    let cols = read_columns(path, &["time_s", "value"])?;
    if cols[1].len() != meta.sample_count {
        return Err(misconfig(format!("{}: sidecar promises {} samples", path.display(), meta.sample_count)));
    }
    Signal::new(cols[1].clone(), meta.sampling_frequency, meta.source)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub split: Split,
    pub sampling_frequency: f64,
    pub sample_count: usize,
    pub period: Option<usize>,
    /// One entry per record; records are stored back to back, each
    /// `sample_count / input_sources.len()` samples long.
    pub input_sources: Vec<SignalSource>,
    /// Free-form generation details (system parameters, integration settings).
    #[serde(default)]
    pub provenance: serde_json::Value,
}

/// Columns `time_s, u_N, y_m` plus a sidecar.
pub fn write_dataset(path: &Path, data: &Dataset, provenance: serde_json::Value) -> Result<()> {
    write_realizations(path, std::slice::from_ref(data), provenance)
}

/// Several equally long records of one split in a single file. Time keeps
/// running across record boundaries.
pub fn write_realizations(path: &Path, records: &[Dataset], provenance: serde_json::Value) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| misconfig("no records to write"))?;
    if records
        .iter()
        .any(|r| r.len() != first.len() || r.fs() != first.fs() || r.period != first.period || r.split != first.split)
    {
        return Err(misconfig("records in one file must share length, rate, period and split"));
    }
    let fs = first.fs();
    let rows = records
        .iter()
        .flat_map(|r| r.u.samples.iter().zip(&r.y.samples))
        .enumerate()
        .map(|(k, (u, y))| vec![fmt(k as f64 / fs), fmt(*u), fmt(*y)]);
    write_atomic(path, &csv_bytes(&["time_s", "u_N", "y_m"], rows)?)?;
    write_json(
        &sidecar_path(path),
        &DatasetSidecar {
            split: first.split,
            sampling_frequency: fs,
            sample_count: first.len() * records.len(),
            period: first.period,
            input_sources: records.iter().map(|r| r.u.source.clone()).collect(),
            provenance,
        },
    )
}

/// Reads a single-record dataset file.
pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut records = read_realizations(path)?;
    if records.len() != 1 {
        return Err(misconfig(format!(
            "{} holds {} realizations; read it with read_realizations",
            path.display(),
            records.len()
        )));
    }
    Ok(records.remove(0))
}

pub fn read_realizations(path: &Path) -> Result<Vec<Dataset>> {
    let meta: DatasetSidecar = read_json(&sidecar_path(path))?;
    let cols = read_columns(path, &["time_s", "u_N", "y_m"])?;
    if cols[1].len() != meta.sample_count {
        return Err(misconfig(format!("{}: sidecar promises {} samples", path.display(), meta.sample_count)));
    }
    let m = meta.input_sources.len();
    if m == 0 || !meta.sample_count.is_multiple_of(m) {
        return Err(misconfig(format!(
            "{}: {} samples do not split into {m} equal realizations",
            path.display(),
            meta.sample_count
        )));
    }
    let len = meta.sample_count / m;
    let fs = meta.sampling_frequency;
    (0..m)
        .map(|i| {
            let span = i * len..(i + 1) * len;
            let u = Signal::new(cols[1][span.clone()].to_vec(), fs, meta.input_sources[i].clone())?;
            let y = Signal::new(cols[2][span].to_vec(), fs, SignalSource::Simulated)?;
            Dataset::new(u, y, meta.split, meta.period)
        })
        .collect()
}

/// Reads only the sidecar of a dataset file.
pub fn read_dataset_sidecar(path: &Path) -> Result<DatasetSidecar> {
    read_json(&sidecar_path(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrfSidecar {
    sampling_frequency: f64,
    realization_count: usize,
    period_count: usize,
    input_rms: f64,
    output_rms: f64,
}

/// Columns `freq_hz, re_G, im_G, sigma2` plus a sidecar with the counts.
pub fn write_frf(path: &Path, frf: &FrfEstimate) -> Result<()> {
    let rows = (0..frf.len()).map(|k| {
        vec![
            fmt(frf.frequencies[k]),
            fmt(frf.g[k].re),
            fmt(frf.g[k].im),
            fmt(frf.sigma2[k]),
        ]
    });
    write_atomic(path, &csv_bytes(&["freq_hz", "re_G", "im_G", "sigma2"], rows)?)?;
    write_json(
        &sidecar_path(path),
        &FrfSidecar {
            sampling_frequency: frf.sampling_frequency,
            realization_count: frf.realization_count,
            period_count: frf.period_count,
            input_rms: frf.input_rms,
            output_rms: frf.output_rms,
        },
    )
}

pub fn read_frf(path: &Path) -> Result<FrfEstimate> {
    let meta: FrfSidecar = read_json(&sidecar_path(path))?;
    let cols = read_columns(path, &["freq_hz", "re_G", "im_G", "sigma2"])?;
    let est = FrfEstimate {
        frequencies: cols[0].clone(),
        g: cols[1].iter().zip(&cols[2]).map(|(r, i)| Complex64::new(*r, *i)).collect(),
        sigma2: cols[3].clone(),
        sampling_frequency: meta.sampling_frequency,
        realization_count: meta.realization_count,
        period_count: meta.period_count,
        input_rms: meta.input_rms,
        output_rms: meta.output_rms,
    };
    est.validate()?;
    Ok(est)
}

/// Columns `iter, cost, lambda, val_rms_db`.
pub fn write_training_log(path: &Path, report: &TrainReport) -> Result<()> {
    let rows = report.log.iter().map(|it| {
        vec![
            it.iteration.to_string(),
            fmt(it.cost),
            fmt(it.lambda),
            opt(it.validation),
        ]
    });
    write_atomic(path, &csv_bytes(&["iter", "cost", "lambda", "val_rms_db"], rows)?)
}

/// One row per trained candidate; failed candidates carry empty error cells.
pub fn write_sweep(path: &Path, report: &SweepReport) -> Result<()> {
    let rows = report.rows.iter().map(|r| {
        let failed = r.failure.is_some();
        let cell = |v: f64| if failed { String::new() } else { fmt(v) };
        vec![
            r.r.to_string(),
            r.d.to_string(),
            r.trial.to_string(),
            r.seed.to_string(),
            cell(r.cpd_fit_error),
            cell(r.train_rms_db),
            cell(r.val_rms_db),
            if failed { String::new() } else { opt(r.test_ms_rms_db) },
            if failed { String::new() } else { opt(r.test_ss_rms_db) },
            r.param_count.to_string(),
        ]
    });
    write_atomic(
        path,
        &csv_bytes(
            &[
                "r",
                "d",
                "trial",
                "seed",
                "cpd_fit_error",
                "train_rms_db",
                "val_rms_db",
                "test_ms_rms_db",
                "test_ss_rms_db",
                "param_count",
            ],
            rows,
        )?,
    )
}

/// Generic numeric table writer for plot data.
pub fn write_table(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let rows = rows.into_iter().map(|r| r.into_iter().map(fmt).collect());
    write_atomic(path, &csv_bytes(header, rows)?)
}
