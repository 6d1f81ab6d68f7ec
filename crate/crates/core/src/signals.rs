//! Excitation signals and spectral helpers.
//!
//! Random-phase multisines are synthesised on the DFT grid of one period, so
//! every non-excited line is exactly zero up to rounding. Swept sines use a
//! linear instantaneous-frequency law.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{misconfig, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    /// Samples per period; must be an even power of two.
    pub samples_per_period: usize,
    pub sampling_frequency: f64,
    pub band_low: f64,
    pub band_high: f64,
    pub target_rms: f64,
    pub period_count: usize,
    pub seed: u64,
}

impl Default for MultisineSpec {
    fn default() -> Self {
        Self {
            samples_per_period: 8192,
            sampling_frequency: 750.0,
            band_low: 5.0,
            band_high: 150.0,
            target_rms: 55.0,
            period_count: 1,
            seed: 0,
        }
    }
}

impl MultisineSpec {
    pub fn validate(&self) -> Result<()> {
        let ns = self.samples_per_period;
        if ns < 2 || !ns.is_power_of_two() {
            return Err(misconfig(format!(
                "samples per period must be an even power of two, got {ns}"
            )));
        }
        if !(self.sampling_frequency > 0.0) {
            return Err(misconfig("sampling frequency must be positive"));
        }
        if !(self.band_low >= 0.0 && self.band_low < self.band_high) {
            return Err(misconfig(format!(
                "band [{}, {}] Hz is empty or reversed",
                self.band_low, self.band_high
            )));
        }
        if self.band_high >= self.sampling_frequency / 2.0 {
            return Err(misconfig(format!(
                "band edge {} Hz is not below Nyquist ({} Hz)",
                self.band_high,
                self.sampling_frequency / 2.0
            )));
        }
        if !(self.target_rms > 0.0) || !self.target_rms.is_finite() {
            return Err(misconfig("target rms must be positive"));
        }
        if self.period_count == 0 {
            return Err(misconfig("period count must be at least 1"));
        }
        self.excited_lines().map(|_| ())
    }

    pub fn frequency_resolution(&self) -> f64 {
        self.sampling_frequency / self.samples_per_period as f64
    }

    /// DFT line indices `k` with `band_low <= k fs / Ns <= band_high`.
    pub fn excited_lines(&self) -> Result<RangeInclusive<usize>> {
        let ns = self.samples_per_period as f64;
        let fs = self.sampling_frequency;
        // Exact rational bounds: k >= band_low * Ns / fs, k <= band_high * Ns / fs.
        let lo = (self.band_low * ns / fs - 1e-9).ceil().max(1.0) as usize;
        let hi = (self.band_high * ns / fs + 1e-9).floor() as usize;
        let hi = hi.min(self.samples_per_period / 2 - 1);
        if lo > hi {
            return Err(misconfig(format!(
                "no DFT line falls inside [{}, {}] Hz at resolution {} Hz",
                self.band_low,
                self.band_high,
                self.frequency_resolution()
            )));
        }
        Ok(lo..=hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweptSineSpec {
    pub f_start: f64,
    pub f_end: f64,
    /// Hz per minute.
    pub sweep_rate: f64,
    pub amplitude: f64,
    pub sampling_frequency: f64,
    /// Seconds. Derived from the sweep rate when unset.
    #[serde(default)]
    pub duration: Option<f64>,
}

impl Default for SweptSineSpec {
    fn default() -> Self {
        Self {
            f_start: 20.0,
            f_end: 50.0,
            sweep_rate: 10.0,
            amplitude: 40.0,
            sampling_frequency: 750.0,
            duration: None,
        }
    }
}

impl SweptSineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sweep_rate > 0.0) {
            return Err(misconfig(format!(
                "sweep rate must be positive, got {} Hz/min",
                self.sweep_rate
            )));
        }
        if !(self.f_start > 0.0 && self.f_start <= self.f_end) {
            return Err(misconfig(format!(
                "sweep range {} -> {} Hz is reversed or non-positive",
                self.f_start, self.f_end
            )));
        }
        if self.f_end >= self.sampling_frequency / 2.0 {
            return Err(misconfig("sweep end frequency is not below Nyquist"));
        }
        if self.f_start == self.f_end && self.duration.is_none() {
            return Err(misconfig("a zero-width sweep needs an explicit duration"));
        }
        if let Some(d) = self.duration {
            if !(d > 0.0) {
                return Err(misconfig("sweep duration must be positive"));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.duration
            .unwrap_or((self.f_end - self.f_start) / self.sweep_rate * 60.0)
    }

    pub fn sample_count(&self) -> usize {
        (self.duration() * self.sampling_frequency).round() as usize
    }
}

/// Where a signal came from; stored in JSON sidecars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalSource {
    Multisine(MultisineSpec),
    SweptSine(SweptSineSpec),
    Simulated,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sampling_frequency: f64,
    pub source: SignalSource,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sampling_frequency: f64, source: SignalSource) -> Result<Self> {
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(misconfig(format!("sample {i} is not finite")));
        }
        if !(sampling_frequency > 0.0) {
            return Err(misconfig("sampling frequency must be positive"));
        }
        Ok(Self {
            samples,
            sampling_frequency,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        let dt = 1.0 / self.sampling_frequency;
        (0..self.samples.len()).map(move |i| i as f64 * dt)
    }
}

/// One period of a random-phase multisine, scaled to the target rms and tiled.
pub fn generate_multisine(spec: &MultisineSpec) -> Result<Signal> {
    spec.validate()?;
    let ns = spec.samples_per_period;
    let lines = spec.excited_lines()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let phase = Uniform::new(-PI, PI).expect("valid phase interval");

    let mut spectrum = vec![Complex64::new(0.0, 0.0); ns];
    for k in lines {
        let phi: f64 = phase.sample(&mut rng);
        let line = Complex64::from_polar(1.0, phi);
        spectrum[k] = line;
        spectrum[ns - k] = line.conj();
    }
    FftPlanner::new().plan_fft_inverse(ns).process(&mut spectrum);

    let mut period: Vec<f64> = spectrum.iter().map(|c| c.re).collect();
    let scale = spec.target_rms / rms(&period);
    period.iter_mut().for_each(|v| *v *= scale);

    let samples = period
        .iter()
        .copied()
        .cycle()
        .take(ns * spec.period_count)
        .collect();
    Signal::new(
        samples,
        spec.sampling_frequency,
        SignalSource::Multisine(spec.clone()),
    )
}

/// Linear chirp `A sin(2π (f0 t + (f1 - f0) t² / 2T))`.
pub fn generate_swept_sine(spec: &SweptSineSpec) -> Result<Signal> {
    spec.validate()?;
    let duration = spec.duration();
    let chirp = (spec.f_end - spec.f_start) / duration;
    let dt = 1.0 / spec.sampling_frequency;
    let samples = (0..spec.sample_count())
        .map(|i| {
            let t = i as f64 * dt;
            spec.amplitude * (2.0 * PI * (spec.f_start * t + 0.5 * chirp * t * t)).sin()
        })
        .collect();
    Signal::new(
        samples,
        spec.sampling_frequency,
        SignalSource::SweptSine(spec.clone()),
    )
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt()
}

/// `20 log10(rms)`. An all-zero sequence yields `f64::NEG_INFINITY`.
pub fn rms_db(samples: &[f64]) -> f64 {
    to_db(rms(samples))
}

pub fn to_db(amplitude: f64) -> f64 {
    if amplitude == 0.0 {
        f64::NEG_INFINITY
    } else {
        20.0 * amplitude.log10()
    }
}

/// Unnormalised forward DFT.
pub fn dft(samples: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = samples.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    buf
}

/// Frequency in Hz of DFT line `k` for a record of `len` samples.
pub fn line_frequency(k: usize, len: usize, sampling_frequency: f64) -> f64 {
    k as f64 * sampling_frequency / len as f64
}

/// Band-limited periodic interpolation: treats `samples` as one period of a
/// periodic signal and evaluates it on a grid `factor` times finer.
pub fn periodic_upsample(samples: &[f64], factor: usize) -> Vec<f64> {
    let n = samples.len();
    if factor <= 1 || n == 0 {
        return samples.to_vec();
    }
    let spectrum = dft(samples);
    let m = n * factor;
    let mut padded = vec![Complex64::new(0.0, 0.0); m];
    let half = n / 2;
    for k in 0..n {
        if n.is_multiple_of(2) && k == half {
            // Split the Nyquist bin so the result stays real.
            padded[half] = spectrum[half] * 0.5;
            padded[m - half] = spectrum[half] * 0.5;
        } else if k < half || (n % 2 == 1 && k == half) {
            padded[k] = spectrum[k];
        } else {
            padded[m - (n - k)] = spectrum[k];
        }
    }
    FftPlanner::new().plan_fft_inverse(m).process(&mut padded);
    let norm = 1.0 / n as f64;
    padded.iter().map(|c| c.re * norm).collect()
}
