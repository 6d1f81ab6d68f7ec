//! The four pipeline stages. Each reads its inputs from and writes its
//! outputs to the configured output directory, and updates the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pnlss::boucwen::{make_benchmark_datasets, Dataset};
use pnlss::decouple::{sweep_and_select, DecoupledModel, SweepData, SweepRow};
use pnlss::io;
use pnlss::linear::LinearModel;
use pnlss::linid::{estimate_bla, fit_linear_model, linear_rms_error};
use pnlss::lm::StopReason;
use pnlss::pnlss::{train_pnlss, PnlssModel};
use pnlss::sim::{rms_error_db, Simulate};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{CliError, Stage, StageContext};
use crate::manifest::{config_hash, RunManifest};

/// File locations inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }
    pub fn train(&self) -> PathBuf {
        self.root.join("data/train.csv")
    }
    pub fn validation(&self) -> PathBuf {
        self.root.join("data/validation.csv")
    }
    pub fn test_multisine(&self) -> PathBuf {
        self.root.join("data/test_multisine.csv")
    }
    pub fn test_swept_sine(&self) -> PathBuf {
        self.root.join("data/test_sweptsine.csv")
    }
    pub fn bla(&self) -> PathBuf {
        self.root.join("models/bla.csv")
    }
    pub fn linear_model(&self) -> PathBuf {
        self.root.join("models/linear_model.json")
    }
    pub fn pnlss_model(&self) -> PathBuf {
        self.root.join("models/pnlss_model.json")
    }
    pub fn decoupled_model(&self) -> PathBuf {
        self.root.join("models/decoupled_model.json")
    }
    pub fn training_log(&self) -> PathBuf {
        self.root.join("reports/pnlss_training_log.csv")
    }
    pub fn identify_report(&self) -> PathBuf {
        self.root.join("reports/identify_report.json")
    }
    pub fn sweep_table(&self) -> PathBuf {
        self.root.join("reports/sweep.csv")
    }
    pub fn sweep_report(&self) -> PathBuf {
        self.root.join("reports/sweep_report.json")
    }
    pub fn evaluation_dir(&self, name: &str) -> PathBuf {
        self.root.join("eval").join(name)
    }
}

/// Shared bookkeeping for one stage invocation.
pub(crate) struct StageRun {
    pub stage: Stage,
    pub layout: Layout,
    manifest: RunManifest,
    started: Instant,
}

impl StageRun {
    pub fn start(cfg: &PipelineConfig, stage: Stage) -> Result<Self, CliError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg.output_dir);
        std::fs::create_dir_all(&layout.root).map_err(|e| {
            CliError::new(stage, format!("cannot create output directory {}: {e}", layout.root.display()))
        })?;
        let mut manifest = RunManifest::load_or_new(&layout.root, &config_hash(cfg));
        io::write_json(&layout.config(), cfg).stage(stage)?;
        manifest.record(&layout.root, &layout.config())?;
        Ok(Self {
            stage,
            layout,
            manifest,
            started: Instant::now(),
        })
    }

    pub fn emitted(&mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.record(&self.layout.root, path)
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.manifest
            .record_timing(self.stage, self.started.elapsed().as_secs_f64());
        self.manifest.save(&self.layout.root)?;
        self.manifest.verify(&self.layout.root)
    }
}

fn provenance(cfg: &PipelineConfig) -> serde_json::Value {
    serde_json::json!({
        "system": cfg.system,
        "integration": cfg.integration,
        "transient_periods": cfg.excitation.transient_periods,
        "master_seed": cfg.master_seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedFile {
    pub path: PathBuf,
    pub realizations: usize,
    pub samples: usize,
    pub input_rms: f64,
}

pub fn generate(cfg: &PipelineConfig) -> Result<Vec<GeneratedFile>, CliError> {
    let mut run = StageRun::start(cfg, Stage::Generate)?;
    let data = make_benchmark_datasets(&cfg.system, &cfg.plan(), &cfg.integration).stage(Stage::Generate)?;
    let meta = provenance(cfg);
    let l = run.layout.clone();
    let files: [(PathBuf, &[Dataset]); 4] = [
        (l.train(), &data.train),
        (l.validation(), std::slice::from_ref(&data.validation)),
        (l.test_multisine(), std::slice::from_ref(&data.test_multisine)),
        (l.test_swept_sine(), std::slice::from_ref(&data.test_swept_sine)),
    ];
    let mut out = Vec::new();
    for (path, records) in files {
        io::write_realizations(&path, records, meta.clone()).stage(Stage::Generate)?;
        run.emitted(&path)?;
        run.emitted(&io::sidecar_path(&path))?;
        let input: Vec<f64> = records.iter().flat_map(|r| r.u.samples.iter().copied()).collect();
        out.push(GeneratedFile {
            path,
            realizations: records.len(),
            samples: input.len(),
            input_rms: pnlss::signals::rms(&input),
        });
    }
    run.finish()?;
    Ok(out)
}

/// Datasets of an output directory, read back from disk.
pub struct LoadedData {
    pub train: Vec<Dataset>,
    pub validation: Dataset,
    pub test_multisine: Dataset,
    pub test_swept_sine: Dataset,
}

pub fn load_datasets(layout: &Layout, stage: Stage) -> Result<LoadedData, CliError> {
    let read_all = |p: PathBuf| {
        io::read_realizations(&p).map_err(|e| {
            CliError::new(
                stage,
                format!("cannot read dataset {}: {e}; run `pnlss generate` with the same --out first", p.display()),
            )
        })
    };
    let read_one = |p: PathBuf| read_all(p).map(|mut v| v.remove(0));
    Ok(LoadedData {
        train: read_all(layout.train())?,
        validation: read_one(layout.validation())?,
        test_multisine: read_one(layout.test_multisine())?,
        test_swept_sine: read_one(layout.test_swept_sine())?,
    })
}

/// `None` when the model diverges on the record.
fn error_db<M: Simulate + ?Sized>(model: &M, data: &Dataset) -> Option<f64> {
    rms_error_db(model, data).ok().filter(|v| v.is_finite())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelErrors {
    pub train_db: Option<f64>,
    pub validation_db: Option<f64>,
    pub test_multisine_db: Option<f64>,
    pub test_swept_sine_db: Option<f64>,
}

impl ModelErrors {
    fn of<M: Simulate + ?Sized>(model: &M, data: &LoadedData) -> Self {
        Self {
            train_db: error_db(model, &data.train[0]),
            validation_db: error_db(model, &data.validation),
            test_multisine_db: error_db(model, &data.test_multisine),
            test_swept_sine_db: error_db(model, &data.test_swept_sine),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifyReport {
    pub order: usize,
    pub linear_parameter_count: usize,
    pub nonlinear_parameter_count: usize,
    pub linear: ModelErrors,
    pub pnlss: ModelErrors,
    pub lm_iterations: usize,
    pub selected_iteration: usize,
    pub stop: StopReason,
}

pub fn identify(cfg: &PipelineConfig) -> Result<IdentifyReport, CliError> {
    let mut run = StageRun::start(cfg, Stage::Identify)?;
    let l = run.layout.clone();
    let data = load_datasets(&l, Stage::Identify)?;
    let bla = estimate_bla(&data.train).stage(Stage::Identify)?;
    io::write_frf(&l.bla(), &bla).stage(Stage::Identify)?;
    let linear = fit_linear_model(&bla, cfg.order).stage(Stage::Identify)?;
    log::info!(
        "linear model: order {}, multisine test {:.2} dB",
        linear.order(),
        linear_rms_error(&linear, &data.test_multisine).unwrap_or(f64::NAN)
    );
    let init = PnlssModel::from_linear(linear.clone(), &cfg.state_degrees, &cfg.output_degrees).stage(Stage::Identify)?;
    let (model, report) =
        train_pnlss(&init, &data.train[0], Some(&data.validation), &cfg.train_options()).stage(Stage::Identify)?;

    io::write_json(&l.linear_model(), &linear).stage(Stage::Identify)?;
    io::write_json(&l.pnlss_model(), &model).stage(Stage::Identify)?;
    io::write_training_log(&l.training_log(), &report).stage(Stage::Identify)?;
    let summary = IdentifyReport {
        order: linear.order(),
        linear_parameter_count: linear.parameter_count(),
        nonlinear_parameter_count: model.nonlinear_parameter_count(),
        linear: ModelErrors::of(&linear, &data),
        pnlss: ModelErrors::of(&model, &data),
        lm_iterations: report.log.len().saturating_sub(1),
        selected_iteration: report.log[report.selected].iteration,
        stop: report.stop,
    };
    io::write_json(&l.identify_report(), &summary).stage(Stage::Identify)?;
    for p in [
        l.bla(),
        io::sidecar_path(&l.bla()),
        l.linear_model(),
        l.pnlss_model(),
        l.training_log(),
        l.identify_report(),
    ] {
        run.emitted(&p)?;
    }
    run.finish()?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub r: usize,
    pub d: usize,
    pub trial: usize,
    pub param_count: usize,
    pub test_multisine_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoupleReport {
    pub rows: Vec<SweepRow>,
    pub best: Option<usize>,
    pub failures: usize,
    pub full_nonlinear_parameter_count: usize,
    pub full_test_multisine_db: Option<f64>,
    /// Candidates not beaten on multisine-test error by any candidate with
    /// fewer or equally many nonlinear parameters.
    pub pareto: Vec<ParetoPoint>,
}

impl DecoupleReport {
    pub fn best_row(&self) -> Option<&SweepRow> {
        self.best.map(|i| &self.rows[i])
    }
}

fn pareto_front(rows: &[SweepRow]) -> Vec<ParetoPoint> {
    let mut pts: Vec<ParetoPoint> = rows
        .iter()
        .filter(|r| r.failure.is_none())
        .filter_map(|r| {
            r.test_ms_rms_db.filter(|v| v.is_finite()).map(|t| ParetoPoint {
                r: r.r,
                d: r.d,
                trial: r.trial,
                param_count: r.param_count,
                test_multisine_db: t,
            })
        })
        .collect();
    pts.sort_by(|a, b| {
        a.param_count
            .cmp(&b.param_count)
            .then(a.test_multisine_db.total_cmp(&b.test_multisine_db))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    for p in pts {
        if front.last().is_none_or(|q| p.test_multisine_db < q.test_multisine_db) {
            front.push(p);
        }
    }
    front
}

pub fn load_pnlss(layout: &Layout, stage: Stage) -> Result<PnlssModel, CliError> {
    io::read_json(&layout.pnlss_model()).map_err(|e| {
        CliError::new(
            stage,
            format!(
                "cannot read {}: {e}; run `pnlss identify` with the same --out first",
                layout.pnlss_model().display()
            ),
        )
    })
}

pub fn decouple(cfg: &PipelineConfig) -> Result<(DecoupleReport, Option<DecoupledModel>), CliError> {
    let mut run = StageRun::start(cfg, Stage::Decouple)?;
    let l = run.layout.clone();
    let full = load_pnlss(&l, Stage::Decouple)?;
    let data = load_datasets(&l, Stage::Decouple)?;
    let sweep_data = SweepData {
        train: &data.train[0],
        validation: &data.validation,
        test_multisine: Some(&data.test_multisine),
        test_swept_sine: Some(&data.test_swept_sine),
    };
    let (report, best) = sweep_and_select(&full, &sweep_data, &cfg.sweep_config()).stage(Stage::Decouple)?;
    io::write_sweep(&l.sweep_table(), &report).stage(Stage::Decouple)?;
    run.emitted(&l.sweep_table())?;
    if let Some(model) = &best {
        io::write_json(&l.decoupled_model(), model).stage(Stage::Decouple)?;
        run.emitted(&l.decoupled_model())?;
    }
    let summary = DecoupleReport {
        failures: report.rows.iter().filter(|r| r.failure.is_some()).count(),
        pareto: pareto_front(&report.rows),
        full_nonlinear_parameter_count: full.nonlinear_parameter_count(),
        full_test_multisine_db: error_db(&full, &data.test_multisine),
        rows: report.rows,
        best: report.best,
    };
    io::write_json(&l.sweep_report(), &summary).stage(Stage::Decouple)?;
    run.emitted(&l.sweep_report())?;
    run.finish()?;
    Ok((summary, best))
}

/// Any model file the pipeline writes.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Linear(LinearModel),
    Pnlss(PnlssModel),
    Decoupled(DecoupledModel),
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let fail = |e: String| CliError::new(Stage::Evaluate, format!("{}: {e}", path.display()));
        let value: serde_json::Value = io::read_json(path).map_err(|e| fail(e.to_string()))?;
        let parsed = if value.get("branch_count").is_some() {
            serde_json::from_value(value).map(AnyModel::Decoupled)
        } else if value.get("state_basis").is_some() {
            serde_json::from_value(value).map(AnyModel::Pnlss)
        } else {
            serde_json::from_value(value).map(AnyModel::Linear)
        };
        parsed.map_err(|e| fail(e.to_string()))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Linear(_) => "linear",
            AnyModel::Pnlss(_) => "pnlss",
            AnyModel::Decoupled(_) => "decoupled",
        }
    }

    pub fn linear(&self) -> &LinearModel {
        match self {
            AnyModel::Linear(m) => m,
            AnyModel::Pnlss(m) => &m.linear,
            AnyModel::Decoupled(m) => &m.linear,
        }
    }

    pub fn nonlinear_parameter_count(&self) -> usize {
        match self {
            AnyModel::Linear(_) => 0,
            AnyModel::Pnlss(m) => m.nonlinear_parameter_count(),
            AnyModel::Decoupled(m) => m.nonlinear_parameter_count(),
        }
    }
}

impl Simulate for AnyModel {
    fn simulate(&self, u: &[f64]) -> pnlss::Result<Vec<f64>> {
        match self {
            AnyModel::Linear(m) => Simulate::simulate(m, u),
            AnyModel::Pnlss(m) => Simulate::simulate(m, u),
            AnyModel::Decoupled(m) => Simulate::simulate(m, u),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(r: usize, d: usize, params: usize, test: Option<f64>) -> SweepRow {
        SweepRow {
            r,
            d,
            trial: 0,
            seed: 0,
            cpd_fit_error: 0.1,
            train_rms_db: -80.0,
            val_rms_db: -80.0,
            test_ms_rms_db: test,
            test_ss_rms_db: None,
            param_count: params,
            failure: None,
        }
    }

    #[test]
    fn pareto_keeps_only_improvements() {
        let rows = vec![
            row(1, 2, 9, Some(-77.0)),
            row(1, 3, 10, Some(-76.0)),
            row(2, 2, 18, Some(-80.0)),
            row(2, 3, 20, None),
            row(3, 10, 51, Some(-92.0)),
            row(3, 11, 54, Some(-91.0)),
        ];
        let front = pareto_front(&rows);
        let kept: Vec<(usize, usize)> = front.iter().map(|p| (p.r, p.d)).collect();
        assert_eq!(kept, vec![(1, 2), (2, 2), (3, 10)]);
    }
}
