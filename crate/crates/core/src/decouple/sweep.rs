use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::branches::fit_branches;
use super::cpd::{cpd, CpdOptions};
use super::model::{assemble_decoupled, train_decoupled, DecoupledModel};
use super::tensor::{build_jacobian_tensor, trajectory_scales};
use crate::boucwen::Dataset;
use crate::error::{misconfig, Result};
use crate::pnlss::{PnlssModel, TrainOptions};
use crate::sim::rms_error_db;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub r_list: Vec<usize>,
    pub d_list: Vec<usize>,
    pub trials: usize,
    pub master_seed: u64,
    pub tensor_points: usize,
    pub cpd: CpdOptions,
    pub train: TrainOptions,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            r_list: (1..=6).collect(),
            d_list: (2..=11).collect(),
            trials: 5,
            master_seed: 0,
            tensor_points: 500,
            cpd: CpdOptions::default(),
            train: TrainOptions::default(),
            workers: 1,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(misconfig("at least one trial per grid point is required"));
        }
        if self.r_list.is_empty() || self.d_list.is_empty() {
            return Err(misconfig("branch and degree lists must not be empty"));
        }
        if self.r_list.contains(&0) || self.d_list.iter().any(|&d| d < 2) {
            return Err(misconfig("branch counts must be >= 1 and degrees >= 2"));
        }
        if self.tensor_points == 0 {
            return Err(misconfig("tensor needs at least one sampling point"));
        }
        Ok(())
    }
}

pub struct SweepData<'a> {
    pub train: &'a Dataset,
    pub validation: &'a Dataset,
    pub test_multisine: Option<&'a Dataset>,
    pub test_swept_sine: Option<&'a Dataset>,
}

/// One trained candidate. Error fields are `+∞` for diverged simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub d: usize,
    pub trial: usize,
    pub seed: u64,
    pub cpd_fit_error: f64,
    pub train_rms_db: f64,
    pub val_rms_db: f64,
    pub test_ms_rms_db: Option<f64>,
    pub test_ss_rms_db: Option<f64>,
    pub param_count: usize,
    #[serde(default)]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    /// Sorted by `(r, d, trial)`.
    pub rows: Vec<SweepRow>,
    /// Index into `rows` of the candidate with the lowest validation error.
    pub best: Option<usize>,
}

/// SplitMix64 finaliser; spreads structured inputs over the seed space.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the sampling grid of `trial`; shared by every `(r, d)`.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    derive_seed(master, trial as u64)
}

fn cpd_seed(trial_seed: u64, r: usize) -> u64 {
    derive_seed(trial_seed, 0x1000 + r as u64)
}

fn error_db<M: crate::sim::Simulate>(model: &M, data: &Dataset) -> f64 {
    rms_error_db(model, data).unwrap_or(f64::INFINITY)
}

/// Tensor and CPD once per `(trial, r)`, then branch fits and training for
/// every degree.
fn run_job(
    full: &PnlssModel,
    scales: &[f64],
    data: &SweepData,
    cfg: &SweepConfig,
    r: usize,
    trial: usize,
) -> Vec<(SweepRow, Option<DecoupledModel>)> {
    let seed = trial_seed(cfg.master_seed, trial);
    let failed = |d: usize, msg: String| {
        (
            SweepRow {
                r,
                d,
                trial,
                seed,
                cpd_fit_error: f64::NAN,
                train_rms_db: f64::INFINITY,
                val_rms_db: f64::INFINITY,
                test_ms_rms_db: None,
                test_ss_rms_db: None,
                param_count: (2 * full.order() + d + 1) * r,
                failure: Some(msg),
            },
            None,
        )
    };
    let factors = build_jacobian_tensor(full, cfg.tensor_points, seed, scales)
        .and_then(|t| cpd(&t.values, r, &cfg.cpd, cpd_seed(seed, r)).map(|f| (t, f)));
    let (tensor, factors) = match factors {
        Ok(x) => x,
        Err(e) => return cfg.d_list.iter().map(|&d| failed(d, e.to_string())).collect(),
    };
    cfg.d_list
        .iter()
        .map(|&d| {
            let trained = fit_branches(&factors, &tensor, d)
                .and_then(|b| {
                    assemble_decoupled(
                        full.linear.clone(),
                        factors.v.clone(),
                        factors.w.clone(),
                        b.coefficients,
                        d,
                    )
                })
                .and_then(|init| train_decoupled(&init, data.train, Some(data.validation), &cfg.train));
            match trained {
                Ok((model, report)) => {
                    let row = SweepRow {
                        r,
                        d,
                        trial,
                        seed,
                        cpd_fit_error: factors.fit_error,
                        train_rms_db: report.final_train_rms_db,
                        val_rms_db: error_db(&model, data.validation),
                        test_ms_rms_db: data.test_multisine.map(|t| error_db(&model, t)),
                        test_ss_rms_db: data.test_swept_sine.map(|t| error_db(&model, t)),
                        param_count: model.nonlinear_parameter_count(),
                        failure: None,
                    };
                    (row, Some(model))
                }
                Err(e) => failed(d, e.to_string()),
            }
        })
        .collect()
}

/// Runs the full `(r, d, trial)` grid and keeps the model with the lowest
/// validation error. Trials that fail are recorded and skipped.
pub fn sweep_and_select(
    full: &PnlssModel,
    data: &SweepData,
    cfg: &SweepConfig,
) -> Result<(SweepReport, Option<DecoupledModel>)> {
    cfg.validate()?;
    let (u, _) = data.train.input_with_transient();
    let scales = trajectory_scales(full, &u)?;
    let jobs: Vec<(usize, usize)> = cfg
        .r_list
        .iter()
        .flat_map(|&r| (0..cfg.trials).map(move |t| (r, t)))
        .collect();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::new());
    let workers = cfg.workers.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(r, trial)) = jobs.get(i) else {
                    break;
                };
                let out = run_job(full, &scales, data, cfg, r, trial);
                for (row, _) in &out {
                    log::info!(
                        "r={} d={} trial={} val={:.2} dB{}",
                        row.r,
                        row.d,
                        row.trial,
                        row.val_rms_db,
                        row.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default()
                    );
                }
                results.lock().expect("result collector poisoned").extend(out);
            });
        }
    });
    let mut all = results.into_inner().expect("result collector poisoned");
    all.sort_by_key(|(row, _)| (row.r, row.d, row.trial));
    let best = all
        .iter()
        .enumerate()
        .filter(|(_, (row, m))| m.is_some() && row.val_rms_db.is_finite())
        .min_by(|a, b| a.1 .0.val_rms_db.total_cmp(&b.1 .0.val_rms_db))
        .map(|(i, _)| i);
    let model = best.and_then(|i| all[i].1.clone());
    let rows = all.into_iter().map(|(row, _)| row).collect();
    Ok((SweepReport { rows, best }, model))
}
