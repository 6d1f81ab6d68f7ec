use std::path::{Path, PathBuf};

use pnlss::boucwen::{BenchmarkPlan, BoucWenParams, SimConfig};
use pnlss::decouple::{derive_seed, CpdOptions, SweepConfig};
use pnlss::lm::LmOptions;
use pnlss::pnlss::TrainOptions;
use pnlss::signals::{MultisineSpec, SweptSineSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Stage};

/// Named sub-seed streams drawn from the master seed.
mod stream {
    pub const TRAIN: u64 = 0x100;
    pub const VALIDATION: u64 = 0x200;
    pub const TEST: u64 = 0x300;
    pub const SWEEP: u64 = 0x400;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcitationConfig {
    pub sampling_frequency: f64,
    pub samples_per_period: usize,
    pub band_low: f64,
    pub band_high: f64,
    /// Training and validation rms in N.
    pub train_rms: f64,
    pub test_rms: f64,
    /// Realizations `M` used for the BLA; the first also trains the PNLSS.
    pub bla_realizations: usize,
    /// Retained periods `P` per training realization.
    pub bla_periods: usize,
    pub validation_periods: usize,
    pub test_periods: usize,
    pub transient_periods: usize,
    pub swept_sine: SweptSineSpec,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            sampling_frequency: 750.0,
            samples_per_period: 8192,
            band_low: 5.0,
            band_high: 150.0,
            train_rms: 55.0,
            test_rms: 50.0,
            bla_realizations: 4,
            bla_periods: 2,
            validation_periods: 1,
            test_periods: 1,
            transient_periods: 2,
            swept_sine: SweptSineSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub r_list: Vec<usize>,
    pub d_list: Vec<usize>,
    pub trials: usize,
    pub tensor_points: usize,
    pub cpd: CpdOptions,
    pub lm: LmOptions,
}

impl Default for SweepSettings {
    fn default() -> Self {
        let base = SweepConfig::default();
        Self {
            r_list: base.r_list,
            d_list: base.d_list,
            trials: base.trials,
            tensor_points: base.tensor_points,
            cpd: CpdOptions::default(),
            lm: LmOptions::default(),
        }
    }
}

/// Whole-pipeline configuration; every field has a default, so a partial
/// JSON document is enough.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub system: BoucWenParams,
    pub integration: SimConfig,
    pub excitation: ExcitationConfig,
    pub order: usize,
    pub state_degrees: Vec<u32>,
    pub output_degrees: Vec<u32>,
    pub lm: LmOptions,
    pub sweep: SweepSettings,
    pub master_seed: u64,
    pub workers: usize,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            system: BoucWenParams::default(),
            integration: SimConfig::default(),
            excitation: ExcitationConfig::default(),
            order: 3,
            state_degrees: vec![2, 3],
            output_degrees: Vec::new(),
            lm: LmOptions::default(),
            sweep: SweepSettings::default(),
            master_seed: 0,
            workers: 1,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(Stage::Config, format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::new(Stage::Config, format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let fail = |e: pnlss::Error| CliError::new(Stage::Config, e.to_string());
        self.system.validate().map_err(fail)?;
        self.integration.validate().map_err(fail)?;
        let plan = self.plan();
        for spec in plan.train.iter().chain([&plan.validation, &plan.test_multisine]) {
            spec.validate().map_err(fail)?;
        }
        plan.test_swept_sine.validate().map_err(fail)?;
        let bad = |msg: &str| Err(CliError::new(Stage::Config, msg.to_string()));
        if self.excitation.bla_realizations == 0 || self.excitation.bla_periods == 0 {
            return bad("at least one BLA realization with one period is required");
        }
        if self.order == 0 {
            return bad("model order must be at least 1");
        }
        if self.state_degrees.iter().chain(&self.output_degrees).any(|&d| d < 2) {
            return bad("nonlinear degrees start at 2");
        }
        if self.workers == 0 {
            return bad("worker count must be at least 1");
        }
        self.sweep_config().validate().map_err(fail)
    }

    pub fn multisine(&self, target_rms: f64, period_count: usize, seed: u64) -> MultisineSpec {
        let e = &self.excitation;
        MultisineSpec {
            samples_per_period: e.samples_per_period,
            sampling_frequency: e.sampling_frequency,
            band_low: e.band_low,
            band_high: e.band_high,
            target_rms,
            period_count,
            seed,
        }
    }

    /// Excitations for every split, seeded from the master seed.
    pub fn plan(&self) -> BenchmarkPlan {
        let e = &self.excitation;
        let master = self.master_seed;
        BenchmarkPlan {
            train: (0..e.bla_realizations)
                .map(|i| self.multisine(e.train_rms, e.bla_periods, derive_seed(master, stream::TRAIN + i as u64)))
                .collect(),
            validation: self.multisine(e.train_rms, e.validation_periods, derive_seed(master, stream::VALIDATION)),
            test_multisine: self.multisine(e.test_rms, e.test_periods, derive_seed(master, stream::TEST)),
            test_swept_sine: SweptSineSpec {
                sampling_frequency: e.sampling_frequency,
                ..e.swept_sine.clone()
            },
            transient_periods: e.transient_periods,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lm: self.lm.clone(),
            frequency_weights: None,
        }
    }

    pub fn sweep_config(&self) -> SweepConfig {
        let s = &self.sweep;
        SweepConfig {
            r_list: s.r_list.clone(),
            d_list: s.d_list.clone(),
            trials: s.trials,
            master_seed: derive_seed(self.master_seed, stream::SWEEP),
            tensor_points: s.tensor_points,
            cpd: s.cpd.clone(),
            train: TrainOptions {
                lm: s.lm.clone(),
                frequency_weights: None,
            },
            workers: self.workers,
        }
    }
}
