//! Bouc-Wen hysteretic oscillator and benchmark data generation.
//!
//! ```text
//! m ÿ + c ẏ + k y + z = u(t)
//! ż = α ẏ − β (γ |ẏ| |z|^(ν−1) z + δ ẏ |z|^ν)
//! ```
//!
//! Time stepping uses Newmark's scheme for the mechanical part and the same
//! γ-weighted rule for `z`; both unknowns are solved together by Newton
//! iterations at every sub-step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{misconfig, Error, Result};
use crate::linear::LinearModel;
use crate::signals::{
    generate_multisine, generate_swept_sine, periodic_upsample, MultisineSpec, Signal,
    SignalSource, SweptSineSpec,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoucWenParams {
    pub mass: f64,
    pub damping: f64,
    pub stiffness: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub nu: f64,
}

impl Default for BoucWenParams {
    /// Benchmark values.
    fn default() -> Self {
        Self {
            mass: 2.0,
            damping: 10.0,
            stiffness: 5e4,
            alpha: 5e4,
            beta: 1e3,
            gamma: 0.8,
            delta: -1.1,
            nu: 1.0,
        }
    }
}

impl BoucWenParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mass > 0.0) {
            return Err(misconfig("mass must be positive"));
        }
        if !(self.stiffness > 0.0) {
            return Err(misconfig("stiffness must be positive"));
        }
        if !(self.nu >= 1.0) {
            return Err(misconfig("Bouc-Wen exponent nu must be >= 1"));
        }
        let all = [
            self.damping,
            self.alpha,
            self.beta,
            self.gamma,
            self.delta,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(misconfig("Bouc-Wen parameters must be finite"));
        }
        Ok(())
    }

    /// `ż` as a function of velocity and hysteretic force, with its partial
    /// derivatives `(∂/∂ẏ, ∂/∂z)`.
    fn hysteresis_rate(&self, v: f64, z: f64) -> (f64, f64, f64) {
        let az = z.abs();
        let pow_m1 = az.powf(self.nu - 1.0);
        let pow = az * pow_m1;
        let f = self.alpha * v - self.beta * (self.gamma * v.abs() * pow_m1 * z + self.delta * v * pow);
        let dv = self.alpha
            - self.beta * (self.gamma * v.signum() * pow_m1 * z + self.delta * pow);
        let dz = -self.beta
            * (self.gamma * v.abs() * self.nu * pow_m1 + self.delta * v * self.nu * pow_m1 * z.signum());
        (f, dv, dz)
    }
}

/// How the sampled input is evaluated between samples on the fine grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputInterpolation {
    ZeroOrderHold,
    Linear,
    /// Exact band-limited interpolation; the record must hold whole periods.
    Periodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub oversample_factor: usize,
    pub newmark_beta: f64,
    pub newmark_gamma: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub interpolation: InputInterpolation,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            oversample_factor: 20,
            newmark_beta: 0.25,
            newmark_gamma: 0.5,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            interpolation: InputInterpolation::Linear,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.oversample_factor == 0 {
            return Err(misconfig("oversample factor must be >= 1"));
        }
        if !(self.newmark_beta > 0.0 && self.newmark_beta <= 0.5) {
            return Err(misconfig("Newmark beta must lie in (0, 0.5]"));
        }
        if !(0.0..=1.0).contains(&self.newmark_gamma) {
            return Err(misconfig("Newmark gamma must lie in [0, 1]"));
        }
        if self.newton_max_iter == 0 || !(self.newton_tol > 0.0) {
            return Err(misconfig("Newton tolerance and iteration cap must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    TestMultisine,
    TestSweptSine,
    Other,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::TestMultisine => "test_multisine",
            Split::TestSweptSine => "test_sweptsine",
            Split::Other => "other",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub u: Signal,
    pub y: Signal,
    pub split: Split,
    /// Samples per period when the record is in periodic steady state.
    #[serde(default)]
    pub period: Option<usize>,
}

impl Dataset {
    pub fn new(u: Signal, y: Signal, split: Split, period: Option<usize>) -> Result<Self> {
        if u.len() != y.len() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} samples, output {}",
                u.len(),
                y.len()
            )));
        }
        if u.sampling_frequency != y.sampling_frequency {
            return Err(misconfig("input and output sampling frequencies differ"));
        }
        if let Some(p) = period {
            if p == 0 || !u.len().is_multiple_of(p) {
                return Err(misconfig(format!(
                    "record length {} is not a whole number of {p}-sample periods",
                    u.len()
                )));
            }
        }
        Ok(Self { u, y, split, period })
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn fs(&self) -> f64 {
        self.u.sampling_frequency
    }

    /// Input with one period prepended for periodic records, plus the number
    /// of leading samples a model simulation should discard.
    pub fn input_with_transient(&self) -> (Vec<f64>, usize) {
        match self.period {
            Some(p) => {
                let u = &self.u.samples;
                let mut ext = Vec::with_capacity(u.len() + p);
                ext.extend_from_slice(&u[u.len() - p..]);
                ext.extend_from_slice(u);
                (ext, p)
            }
            None => (self.u.samples.clone(), 0),
        }
    }

    pub fn period_count(&self) -> usize {
        self.period.map_or(1, |p| self.len() / p)
    }
}

/// Outputs of one integration run at the sampled rate.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub displacement: Vec<f64>,
    pub velocity: Vec<f64>,
    pub hysteretic_force: Vec<f64>,
}

/// Simulates from rest and returns the sampled output as a dataset.
pub fn simulate(params: &BoucWenParams, u: &Signal, cfg: &SimConfig) -> Result<Dataset> {
    let traj = integrate(params, &u.samples, u.sampling_frequency, cfg)?;
    let y = Signal::new(traj.displacement, u.sampling_frequency, SignalSource::Simulated)?;
    Dataset::new(u.clone(), y, Split::Other, None)
}

/// Full state trajectory sampled at the input rate.
pub fn integrate(params: &BoucWenParams, u: &[f64], fs: f64, cfg: &SimConfig) -> Result<Trajectory> {
    params.validate()?;
    cfg.validate()?;
    if let Some(i) = u.iter().position(|v| !v.is_finite()) {
        return Err(misconfig(format!("input sample {i} is not finite")));
    }
    let s = cfg.oversample_factor;
    let len = u.len();
    let fine = fine_input(u, s, cfg.interpolation);
    let h = 1.0 / (fs * s as f64);

    let BoucWenParams {
        mass: m,
        damping: c,
        stiffness: k,
        ..
    } = *params;
    let (nb, ng) = (cfg.newmark_beta, cfg.newmark_gamma);
    let dady = 1.0 / (nb * h * h);
    let dvdy = ng / (nb * h);
    let k_eff = m * dady + c * dvdy + k;

    let (mut y, mut v, mut z) = (0.0f64, 0.0f64, 0.0f64);
    let mut a = fine.first().copied().unwrap_or(0.0) / m;
    let mut zr = params.hysteresis_rate(v, z).0;

    let mut out = Trajectory {
        displacement: Vec::with_capacity(len),
        velocity: Vec::with_capacity(len),
        hysteretic_force: Vec::with_capacity(len),
    };
    for i in 0..len {
        out.displacement.push(y);
        out.velocity.push(v);
        out.hysteretic_force.push(z);
        if i + 1 == len {
            break;
        }
        for j in 1..=s {
            let step = i * s + j;
            let u1 = fine[step];
            let mut y1 = y + h * v + 0.5 * h * h * a;
            let mut z1 = z + h * zr;
            let mut converged = false;
            let mut last_res = f64::INFINITY;
            for _ in 0..cfg.newton_max_iter {
                let a1 = (y1 - y - h * v - h * h * (0.5 - nb) * a) * dady;
                let v1 = v + h * ((1.0 - ng) * a + ng * a1);
                let (f1, fv, fz) = params.hysteresis_rate(v1, z1);
                let r1 = m * a1 + c * v1 + k * y1 + z1 - u1;
                let r2 = z1 - z - h * ((1.0 - ng) * zr + ng * f1);
                let force_scale = u1.abs() + (k * y1).abs() + z1.abs() + (m * a1).abs() + (c * v1).abs();
                let z_scale = z1.abs() + z.abs() + h * (zr.abs() + f1.abs());
                if r1.abs() <= cfg.newton_tol * force_scale && r2.abs() <= cfg.newton_tol * z_scale {
                    converged = true;
                    break;
                }
                last_res = r1.abs().max(r2.abs());
                let j21 = -h * ng * fv * dvdy;
                let j22 = 1.0 - h * ng * fz;
                let det = k_eff * j22 - j21;
                let dy = (r1 * j22 - r2) / det;
                let dz = (k_eff * r2 - j21 * r1) / det;
                y1 -= dy;
                z1 -= dz;
                if !(y1.is_finite() && z1.is_finite()) {
                    return Err(Error::Divergence { index: i });
                }
                // Updates at rounding level: the residual cannot shrink further.
                if dy.abs() <= 4.0 * f64::EPSILON * y1.abs() && dz.abs() <= 4.0 * f64::EPSILON * z1.abs() {
                    converged = true;
                    break;
                }
            }
            if !converged {
                return Err(Error::IntegrationFailure {
                    step,
                    residual: last_res,
                });
            }
            let a1 = (y1 - y - h * v - h * h * (0.5 - nb) * a) * dady;
            let v1 = v + h * ((1.0 - ng) * a + ng * a1);
            y = y1;
            v = v1;
            a = a1;
            z = z1;
            zr = params.hysteresis_rate(v, z).0;
        }
        if !(y.is_finite() && v.is_finite() && z.is_finite()) {
            return Err(Error::Divergence { index: i + 1 });
        }
    }
    Ok(out)
}

fn fine_input(u: &[f64], s: usize, interp: InputInterpolation) -> Vec<f64> {
    if s == 1 {
        return u.to_vec();
    }
    match interp {
        InputInterpolation::Periodic => periodic_upsample(u, s),
        InputInterpolation::ZeroOrderHold => u.iter().flat_map(|&v| std::iter::repeat_n(v, s)).collect(),
        InputInterpolation::Linear => {
            let mut fine = Vec::with_capacity(u.len() * s);
            for i in 0..u.len() {
                let next = u.get(i + 1).copied().unwrap_or(u[i]);
                for j in 0..s {
                    fine.push(u[i] + (next - u[i]) * j as f64 / s as f64);
                }
            }
            fine
        }
    }
}

/// Continuous-time linearisation at the origin, states `(y, ẏ, z)`.
pub fn continuous_linearization(params: &BoucWenParams) -> (DMatrix<f64>, DVector<f64>) {
    let BoucWenParams {
        mass: m,
        damping: c,
        stiffness: k,
        alpha,
        ..
    } = *params;
    let a = DMatrix::from_row_slice(
        3,
        3,
        &[0.0, 1.0, 0.0, -k / m, -c / m, -1.0 / m, 0.0, alpha, 0.0],
    );
    let b = DVector::from_vec(vec![0.0, 1.0 / m, 0.0]);
    (a, b)
}

/// Linearised model discretised with a zero-order hold at `fs`.
pub fn linearized_model(params: &BoucWenParams, fs: f64) -> Result<LinearModel> {
    params.validate()?;
    let (ac, bc) = continuous_linearization(params);
    let (ad, bd) = zoh_discretize(&ac, &bc, 1.0 / fs);
    LinearModel::new(ad, bd, DVector::from_vec(vec![1.0, 0.0, 0.0]), 0.0, fs)
}

pub(crate) fn zoh_discretize(a: &DMatrix<f64>, b: &DVector<f64>, h: f64) -> (DMatrix<f64>, DVector<f64>) {
    let n = a.nrows();
    let mut aug = DMatrix::zeros(n + 1, n + 1);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * h));
    aug.view_mut((0, n), (n, 1)).copy_from(&(b * h));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, 1)).column(0).into_owned())
}

/// Undamped natural frequencies (Hz) of the oscillatory pole pairs of a
/// discrete-time model, ascending.
pub fn natural_frequencies(model: &LinearModel) -> Vec<f64> {
    let mut out: Vec<f64> = model
        .a
        .complex_eigenvalues()
        .iter()
        .filter(|l| l.im > 0.0)
        .map(|l| l.ln().norm() * model.fs / (2.0 * std::f64::consts::PI))
        .collect();
    out.sort_by(|a, b| a.total_cmp(b));
    out
}

/// Excitation plan for the benchmark datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPlan {
    /// One spec per training realization; `period_count` is the number of
    /// retained steady-state periods.
    pub train: Vec<MultisineSpec>,
    pub validation: MultisineSpec,
    pub test_multisine: MultisineSpec,
    pub test_swept_sine: SweptSineSpec,
    /// Periods simulated and discarded ahead of the retained ones.
    pub transient_periods: usize,
}

#[derive(Debug, Clone)]
pub struct BenchmarkDatasets {
    pub train: Vec<Dataset>,
    pub validation: Dataset,
    pub test_multisine: Dataset,
    pub test_swept_sine: Dataset,
}

/// Simulates a multisine in periodic steady state: `transient_periods` extra
/// periods are simulated first and dropped.
pub fn simulate_multisine(
    params: &BoucWenParams,
    spec: &MultisineSpec,
    transient_periods: usize,
    cfg: &SimConfig,
    split: Split,
) -> Result<Dataset> {
    let retained = generate_multisine(spec)?;
    let ns = spec.samples_per_period;
    let total = transient_periods + spec.period_count;
    let input: Vec<f64> = retained.samples[..ns]
        .iter()
        .copied()
        .cycle()
        .take(ns * total)
        .collect();
    let traj = integrate(params, &input, spec.sampling_frequency, cfg)?;
    let skip = ns * transient_periods;
    let y = Signal::new(
        traj.displacement[skip..].to_vec(),
        spec.sampling_frequency,
        SignalSource::Simulated,
    )?;
    Dataset::new(retained, y, split, Some(ns))
}

pub fn make_benchmark_datasets(
    params: &BoucWenParams,
    plan: &BenchmarkPlan,
    cfg: &SimConfig,
) -> Result<BenchmarkDatasets> {
    if plan.train.is_empty() {
        return Err(misconfig("at least one training realization is required"));
    }
    // Multisine records hold whole periods, so exact periodic interpolation applies.
    let periodic_cfg = SimConfig {
        interpolation: InputInterpolation::Periodic,
        ..cfg.clone()
    };
    let tp = plan.transient_periods;
    let train = plan
        .train
        .iter()
        .map(|spec| simulate_multisine(params, spec, tp, &periodic_cfg, Split::Train))
        .collect::<Result<Vec<_>>>()?;
    let validation = simulate_multisine(params, &plan.validation, tp, &periodic_cfg, Split::Validation)?;
    let test_multisine = simulate_multisine(
        params,
        &plan.test_multisine,
        tp,
        &periodic_cfg,
        Split::TestMultisine,
    )?;
    let sweep = generate_swept_sine(&plan.test_swept_sine)?;
    let mut test_swept_sine = simulate(params, &sweep, cfg)?;
    test_swept_sine.split = Split::TestSweptSine;
    Ok(BenchmarkDatasets {
        train,
        validation,
        test_multisine,
        test_swept_sine,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signals::rms;
    use std::f64::consts::PI;

    fn sine(freq: f64, amp: f64, fs: f64, len: usize) -> Signal {
        let samples = (0..len)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin())
            .collect();
        Signal::new(samples, fs, SignalSource::External).unwrap()
    }

    #[test]
    fn zero_input_stays_at_rest() {
        let u = Signal::new(vec![0.0; 500], 750.0, SignalSource::External).unwrap();
        let ds = simulate(&BoucWenParams::default(), &u, &SimConfig::default()).unwrap();
        assert!(ds.y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn resonance_of_linearization() {
        let m = linearized_model(&BoucWenParams::default(), 750.0).unwrap();
        let f = natural_frequencies(&m);
        assert_eq!(f.len(), 1);
        assert!((f[0] - 35.59).abs() < 0.01, "{}", f[0]);
        let expected = (1e5f64 / 2.0).sqrt() / (2.0 * PI);
        assert!((f[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn linearization_static_gain() {
        let p = BoucWenParams::default();
        let m = linearized_model(&p, 750.0).unwrap();
        let g = m.frf(&[1e-4])[0];
        assert!((g.re - 1.0 / (p.stiffness + p.alpha)).abs() < 1e-9);
    }

    #[test]
    fn overdamped_linearization_has_real_poles() {
        let p = BoucWenParams {
            damping: 5e3,
            ..Default::default()
        };
        let m = linearized_model(&p, 750.0).unwrap();
        assert!(m.a.complex_eigenvalues().iter().all(|l| l.im.abs() < 1e-12));
        assert!(natural_frequencies(&m).is_empty());
    }

    #[test]
    fn hysteretic_force_stays_bounded() {
        let p = BoucWenParams::default();
        let u = sine(30.0, 80.0, 750.0, 3000);
        let traj = integrate(&p, &u.samples, 750.0, &SimConfig::default()).unwrap();
        let umax = u.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let zmax = traj.hysteretic_force.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(zmax.is_finite() && zmax < 10.0 * umax, "zmax {zmax}");
    }

    #[test]
    fn deterministic() {
        let p = BoucWenParams::default();
        let u = sine(20.0, 50.0, 750.0, 2000);
        let a = simulate(&p, &u, &SimConfig::default()).unwrap();
        let b = simulate(&p, &u, &SimConfig::default()).unwrap();
        assert_eq!(a.y.samples, b.y.samples);
    }

    #[test]
    fn invalid_configs_rejected() {
        let u = sine(20.0, 1.0, 750.0, 10);
        let bad = SimConfig {
            newmark_beta: 0.0,
            ..Default::default()
        };
        assert!(simulate(&BoucWenParams::default(), &u, &bad).is_err());
        let p = BoucWenParams {
            nu: 0.5,
            ..Default::default()
        };
        assert!(simulate(&p, &u, &SimConfig::default()).is_err());
    }

    #[test]
    fn periodic_steady_state_is_reached() {
        let p = BoucWenParams::default();
        let spec = MultisineSpec {
            samples_per_period: 1024,
            sampling_frequency: 750.0,
            band_low: 5.0,
            band_high: 150.0,
            target_rms: 55.0,
            period_count: 2,
            seed: 1,
        };
        let ds = simulate_multisine(&p, &spec, 4, &SimConfig::default(), Split::Train).unwrap();
        let y = &ds.y.samples;
        let diff: Vec<f64> = (0..1024).map(|i| y[i + 1024] - y[i]).collect();
        assert!(rms(&diff) < 1e-8 * rms(y), "{}", rms(&diff) / rms(y));
    }
}
