//! Shared machinery for simulating models against datasets and for
//! output-error training.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::boucwen::Dataset;
use crate::error::{misconfig, Error, Result};
use crate::linear::LinearModel;
use crate::lm::{LeastSquares, LmIteration, LmOutcome, StopReason};
use crate::signals::rms_db;

/// States beyond this magnitude count as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

/// Anything that maps a raw input sequence to a raw output sequence.
pub trait Simulate {
    fn simulate(&self, u: &[f64]) -> Result<Vec<f64>>;
}

impl Simulate for LinearModel {
    fn simulate(&self, u: &[f64]) -> Result<Vec<f64>> {
        let y = LinearModel::simulate(self, u);
        match y.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::Divergence { index }),
            None => Ok(y),
        }
    }
}

impl Simulate for crate::pnlss::PnlssModel {
    fn simulate(&self, u: &[f64]) -> Result<Vec<f64>> {
        crate::pnlss::PnlssModel::simulate(self, u)
    }
}

/// Simulates on the dataset input (with one extra period ahead of periodic
/// records) and returns `y_model - y_measured`.
pub fn output_error<M: Simulate + ?Sized>(model: &M, data: &Dataset) -> Result<Vec<f64>> {
    let (u, skip) = data.input_with_transient();
    let y = model.simulate(&u)?;
    Ok(y[skip..]
        .iter()
        .zip(&data.y.samples)
        .map(|(m, t)| m - t)
        .collect())
}

pub fn rms_error_db<M: Simulate + ?Sized>(model: &M, data: &Dataset) -> Result<f64> {
    Ok(rms_db(&output_error(model, data)?))
}

/// Model whose output sensitivities can be propagated alongside the state.
///
/// Inputs and outputs here are in the model's internal (scaled) units.
pub trait SensitivityModel {
    fn parameter_vector(&self) -> Vec<f64>;
    fn simulate_scaled(&self, theta: &[f64], u: &[f64]) -> Option<Vec<f64>>;
    /// Output samples from `skip` on and their Jacobian w.r.t. `theta`.
    fn simulate_with_sensitivity(&self, theta: &[f64], u: &[f64], skip: usize) -> Option<(Vec<f64>, DMatrix<f64>)>;
    fn linear(&self) -> &LinearModel;
}

/// Per-period DFT weighting of residuals.
struct Weighting {
    period: usize,
    sqrt_w: Vec<f64>,
}

impl Weighting {
    fn apply(&self, e: &[f64]) -> Vec<f64> {
        let p = self.period;
        let fft = FftPlanner::new().plan_fft_forward(p);
        let norm = 1.0 / (p as f64).sqrt();
        let mut out = Vec::with_capacity(e.len() + 2);
        let mut buf = vec![Complex64::new(0.0, 0.0); p];
        for block in e.chunks(p) {
            for (b, v) in buf.iter_mut().zip(block) {
                *b = Complex64::new(*v, 0.0);
            }
            fft.process(&mut buf);
            for k in 0..=p / 2 {
                let w = self.sqrt_w[k];
                if w > 0.0 {
                    out.push(w * buf[k].re * norm);
                    out.push(w * buf[k].im * norm);
                }
            }
        }
        out
    }

    fn apply_columns(&self, jac: &DMatrix<f64>) -> DMatrix<f64> {
        let cols: Vec<Vec<f64>> = (0..jac.ncols())
            .map(|j| self.apply(jac.column(j).as_slice()))
            .collect();
        let rows = cols.first().map_or(0, |c| c.len());
        DMatrix::from_fn(rows, jac.ncols(), |i, j| cols[j][i])
    }
}

pub(crate) struct OutputErrorProblem<'a, M> {
    model: &'a M,
    u_raw: Vec<f64>,
    u: Vec<f64>,
    skip: usize,
    target: Vec<f64>,
    train: &'a Dataset,
    validation: Option<&'a Dataset>,
    weighting: Option<Weighting>,
}

impl<'a, M: SensitivityModel + Simulate> OutputErrorProblem<'a, M> {
    pub(crate) fn new(
        model: &'a M,
        train: &'a Dataset,
        validation: Option<&'a Dataset>,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        let lin = model.linear();
        if train.fs() != lin.fs {
            return Err(misconfig(format!(
                "model sampled at {} Hz, data at {} Hz",
                lin.fs,
                train.fs()
            )));
        }
        let (u_raw, skip) = train.input_with_transient();
        let u = u_raw.iter().map(|v| v / lin.input_scale).collect();
        let target = train.y.samples.iter().map(|v| v / lin.output_scale).collect();
        let weighting = match weights {
            None => None,
            Some(w) => {
                let period = train
                    .period
                    .ok_or_else(|| misconfig("frequency weighting needs periodic training data"))?;
                if w.len() != period {
                    return Err(misconfig("one weight per DFT line of a period is required"));
                }
                Some(Weighting {
                    period,
                    sqrt_w: w.iter().map(|v| v.max(0.0).sqrt()).collect(),
                })
            }
        };
        Ok(Self {
            model,
            u_raw,
            u,
            skip,
            target,
            train,
            validation,
            weighting,
        })
    }

    fn raw_residual(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.target).map(|(m, t)| m - t).collect()
    }

    pub(crate) fn report<T: Simulate>(&self, selected: &T, outcome: &LmOutcome) -> TrainReport {
        let train_rms = self
            .train_dataset_error(selected)
            .unwrap_or(f64::INFINITY);
        TrainReport {
            log: outcome.log.clone(),
            selected: outcome.selected,
            final_train_rms_db: train_rms,
            final_validation_rms_db: outcome.log[outcome.selected].validation,
            stop: outcome.stop,
        }
    }

    fn train_dataset_error<T: Simulate>(&self, model: &T) -> Option<f64> {
        let y = model.simulate(&self.u_raw).ok()?;
        let e: Vec<f64> = y[self.skip..]
            .iter()
            .zip(&self.train.y.samples)
            .map(|(m, t)| m - t)
            .collect();
        Some(rms_db(&e))
    }
}

impl<M: SensitivityModel + Simulate> LeastSquares for OutputErrorProblem<'_, M> {
    fn parameter_count(&self) -> usize {
        self.model.parameter_vector().len()
    }

    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let y = self.model.simulate_scaled(theta, &self.u)?;
        let e = self.raw_residual(&y[self.skip..]);
        Some(match &self.weighting {
            Some(w) => w.apply(&e),
            None => e,
        })
    }

    fn jacobian(&self, theta: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let (y, jac) = self.model.simulate_with_sensitivity(theta, &self.u, self.skip)?;
        let e = self.raw_residual(&y);
        Some(match &self.weighting {
            Some(w) => (w.apply(&e), w.apply_columns(&jac)),
            None => (e, jac),
        })
    }

    fn validation_score(&self, theta: &[f64]) -> Option<f64> {
        let data = self.validation?;
        let lin = self.model.linear();
        let (u_raw, skip) = data.input_with_transient();
        let u: Vec<f64> = u_raw.iter().map(|v| v / lin.input_scale).collect();
        let score = match self.model.simulate_scaled(theta, &u) {
            Some(y) => {
                let e: Vec<f64> = y[skip..]
                    .iter()
                    .zip(&data.y.samples)
                    .map(|(m, t)| m * lin.output_scale - t)
                    .collect();
                rms_db(&e)
            }
            None => f64::INFINITY,
        };
        Some(score)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Accepted iterates; `validation` holds the validation rms error in dB.
    pub log: Vec<LmIteration>,
    /// Index into `log` of the returned model (lowest validation error).
    pub selected: usize,
    pub final_train_rms_db: f64,
    pub final_validation_rms_db: Option<f64>,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn converged(&self) -> bool {
        self.stop != StopReason::LambdaCap || self.log.len() > 1
    }
}
