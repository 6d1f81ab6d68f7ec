use std::path::Path;

use pnlss::boucwen::Dataset;
use pnlss::io;
use pnlss::signals::{dft, line_frequency, rms, to_db};
use pnlss::sim::output_error;
use pnlss::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Stage, StageContext};
use crate::pipeline::{AnyModel, StageRun};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub model: String,
    pub model_kind: String,
    pub dataset: String,
    pub realization: usize,
    pub samples: usize,
    pub nonlinear_parameter_count: usize,
    pub rms_error: f64,
    /// `None` when the error is exactly zero.
    pub rms_error_db: Option<f64>,
}

/// Lines within this factor of the strongest input line count as excited
/// for periodic records.
const PERIODIC_EXCITATION: f64 = 1e-6;
/// Same for non-periodic records, where leakage spreads the input spectrum.
const TRANSIENT_EXCITATION: f64 = 1e-3;

/// Single-sided amplitude spectra of input, output and error, averaged
/// coherently over periods for periodic records.
fn spectra(data: &Dataset, error: &[f64]) -> (Vec<f64>, Vec<[Complex64; 3]>) {
    let len = data.period.unwrap_or(data.len());
    let blocks = data.len() / len;
    let mut acc = vec![[Complex64::new(0.0, 0.0); 3]; len / 2 + 1];
    for b in 0..blocks {
        let span = b * len..(b + 1) * len;
        let ffts = [
            dft(&data.u.samples[span.clone()]),
            dft(&data.y.samples[span.clone()]),
            dft(&error[span]),
        ];
        for (k, slot) in acc.iter_mut().enumerate() {
            for (s, f) in slot.iter_mut().zip(&ffts) {
                *s += f[k] / blocks as f64;
            }
        }
    }
    let freqs = (0..acc.len()).map(|k| line_frequency(k, len, data.fs())).collect();
    (freqs, acc)
}

pub fn evaluate(
    cfg: &PipelineConfig,
    model_path: &Path,
    data_path: &Path,
    realization: usize,
) -> Result<EvaluationSummary, CliError> {
    let mut run = StageRun::start(cfg, Stage::Evaluate)?;
    let model = AnyModel::load(model_path)?;
    let records = io::read_realizations(data_path)
        .map_err(|e| CliError::new(Stage::Evaluate, format!("{}: {e}", data_path.display())))?;
    let count = records.len();
    let data = records.into_iter().nth(realization).ok_or_else(|| {
        CliError::new(
            Stage::Evaluate,
            format!("{} holds {count} realizations; index {realization} requested", data_path.display()),
        )
    })?;
    let (mfs, dfs) = (model.linear().fs, data.fs());
    if (mfs - dfs).abs() > 1e-9 * dfs {
        return Err(CliError::new(
            Stage::Evaluate,
            format!("model runs at {mfs} Hz but the dataset is sampled at {dfs} Hz"),
        ));
    }
    let error = output_error(&model, &data).stage(Stage::Evaluate)?;

    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut name = format!("{}__{}", stem(model_path), stem(data_path));
    if count > 1 {
        name.push_str(&format!("_r{realization}"));
    }
    let dir = run.layout.evaluation_dir(&name);

    let series = dir.join("error.csv");
    let fs = data.fs();
    io::write_table(
        &series,
        &["time_s", "y_measured", "y_model", "error"],
        data.y.samples.iter().zip(&error).enumerate().map(|(k, (y, e))| vec![k as f64 / fs, *y, y + e, *e]),
    )
    .stage(Stage::Evaluate)?;
    run.emitted(&series)?;

    let (freqs, lines) = spectra(&data, &error);
    let len = data.period.unwrap_or(data.len()) as f64;
    let peak = lines.iter().skip(1).map(|l| l[0].norm()).fold(0.0, f64::max);
    let threshold = if data.period.is_some() {
        PERIODIC_EXCITATION
    } else {
        TRANSIENT_EXCITATION
    } * peak;
    let amp_db = |c: Complex64| to_db(2.0 * c.norm() / len);
    let spectrum = dir.join("spectrum.csv");
    io::write_table(
        &spectrum,
        &["freq_hz", "output_db", "error_db"],
        freqs
            .iter()
            .zip(&lines)
            .skip(1)
            .filter(|(_, l)| l[0].norm() > threshold)
            .map(|(f, l)| vec![*f, amp_db(l[1]), amp_db(l[2])]),
    )
    .stage(Stage::Evaluate)?;
    run.emitted(&spectrum)?;

    if let AnyModel::Decoupled(m) = &model {
        let (u, skip) = data.input_with_transient();
        let states = m.simulate_states(&u).stage(Stage::Evaluate)?;
        let r = m.branch_count();
        let mut header = vec!["time_s".to_string()];
        for l in 1..=r {
            header.push(format!("s_{l}"));
            header.push(format!("g_{l}"));
        }
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let branches = dir.join("branches.csv");
        io::write_table(
            &branches,
            &header,
            states[skip..].iter().enumerate().map(|(k, p)| {
                let mut row = vec![k as f64 / fs];
                for (l, s) in m.project(p).into_iter().enumerate() {
                    row.push(s);
                    row.push(m.branch(l, s).0);
                }
                row
            }),
        )
        .stage(Stage::Evaluate)?;
        run.emitted(&branches)?;
    }

    let rms_error = rms(&error);
    let summary = EvaluationSummary {
        model: model_path.display().to_string(),
        model_kind: model.kind().to_string(),
        dataset: data_path.display().to_string(),
        realization,
        samples: data.len(),
        nonlinear_parameter_count: model.nonlinear_parameter_count(),
        rms_error,
        rms_error_db: Some(to_db(rms_error)).filter(|v| v.is_finite()),
    };
    let summary_path = dir.join("summary.json");
    io::write_json(&summary_path, &summary).stage(Stage::Evaluate)?;
    run.emitted(&summary_path)?;
    run.finish()?;
    Ok(summary)
}
