//! WebAssembly bindings for the static page in `www/`.
//!
//! Each operation has a plain Rust function returning `pnlss::Result`, so it
//! can be tested natively, and a thin `#[wasm_bindgen]` wrapper.

use pnlss::boucwen::{integrate, linearized_model, natural_frequencies, BoucWenParams, SimConfig};
use pnlss::signals::{dft, generate_multisine, line_frequency, to_db, MultisineSpec};
use wasm_bindgen::prelude::*;

/// Sampling rate of every demo signal, Hz.
pub const FS: f64 = 750.0;

/// Paired samples for an x-y plot.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Curve {
    x: Vec<f64>,
    y: Vec<f64>,
}

#[wasm_bindgen]
impl Curve {
    #[wasm_bindgen(getter)]
    pub fn x(&self) -> Vec<f64> {
        self.x.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn y(&self) -> Vec<f64> {
        self.y.clone()
    }
}

/// Frequency response of the linearised oscillator plus its resonance.
#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct Response {
    curve: Curve,
    resonance_hz: f64,
}

#[wasm_bindgen]
impl Response {
    #[wasm_bindgen(getter)]
    pub fn curve(&self) -> Curve {
        self.curve.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn resonance_hz(&self) -> f64 {
        self.resonance_hz
    }
}

/// Displacement (mm) against hysteretic force (N) under a sinusoidal force
/// of `amplitude` N at `frequency_hz`, over `cycles` periods from rest.
pub fn hysteresis_loop(amplitude: f64, frequency_hz: f64, cycles: u32) -> pnlss::Result<Curve> {
    if !(frequency_hz > 0.0 && frequency_hz < FS / 2.0) {
        return Err(pnlss::Error::Misconfiguration(format!(
            "frequency must lie in (0, {}) Hz",
            FS / 2.0
        )));
    }
    let len = (cycles.max(1) as f64 * FS / frequency_hz).ceil() as usize;
    let u: Vec<f64> = (0..len)
        .map(|k| amplitude * (2.0 * std::f64::consts::PI * frequency_hz * k as f64 / FS).sin())
        .collect();
    let traj = integrate(&BoucWenParams::default(), &u, FS, &SimConfig::default())?;
    Ok(Curve {
        x: traj.displacement.iter().map(|v| v * 1e3).collect(),
        y: traj.hysteretic_force,
    })
}

/// One period of a random-phase multisine and its amplitude spectrum in dB
/// on lines `1..Ns/2`.
pub fn multisine_spectrum(
    samples_per_period: usize,
    band_low: f64,
    band_high: f64,
    rms: f64,
    seed: u32,
) -> pnlss::Result<(Vec<f64>, Curve)> {
    let spec = MultisineSpec {
        samples_per_period,
        sampling_frequency: FS,
        band_low,
        band_high,
        target_rms: rms,
        period_count: 1,
        seed: seed as u64,
    };
    let u = generate_multisine(&spec)?;
    let spectrum = dft(&u.samples);
    let ns = samples_per_period;
    let (x, y) = (1..ns / 2)
        .map(|k| (line_frequency(k, ns, FS), to_db(2.0 * spectrum[k].norm() / ns as f64).max(-300.0)))
        .unzip();
    Ok((u.samples, Curve { x, y }))
}

/// Magnitude (dB re 1 m/N) of the linearised oscillator on `points` lines
/// up to `f_max` Hz.
pub fn linearized_response(mass: f64, stiffness: f64, damping: f64, f_max: f64, points: usize) -> pnlss::Result<Response> {
    let params = BoucWenParams {
        mass,
        stiffness,
        damping,
        ..BoucWenParams::default()
    };
    let model = linearized_model(&params, FS)?;
    let points = points.max(2);
    let f_max = f_max.clamp(1.0, FS / 2.0 - 1e-6);
    let freqs: Vec<f64> = (0..points).map(|k| f_max * (k + 1) as f64 / points as f64).collect();
    let mag = model.frf(&freqs).iter().map(|g| to_db(g.norm()).max(-300.0)).collect();
    Ok(Response {
        resonance_hz: natural_frequencies(&model).first().copied().unwrap_or(f64::NAN),
        curve: Curve { x: freqs, y: mag },
    })
}

fn js(e: pnlss::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen(js_name = hysteresisLoop)]
pub fn hysteresis_loop_js(amplitude: f64, frequency_hz: f64, cycles: u32) -> Result<Curve, JsError> {
    hysteresis_loop(amplitude, frequency_hz, cycles).map_err(js)
}

/// Amplitude spectrum of the period `multisineSamples` returns for the same
/// arguments.
#[wasm_bindgen(js_name = multisineSpectrum)]
pub fn multisine_spectrum_js(
    samples_per_period: usize,
    band_low: f64,
    band_high: f64,
    rms: f64,
    seed: u32,
) -> Result<Curve, JsError> {
    multisine_spectrum(samples_per_period, band_low, band_high, rms, seed)
        .map(|(_, c)| c)
        .map_err(js)
}

#[wasm_bindgen(js_name = multisineSamples)]
pub fn multisine_samples_js(
    samples_per_period: usize,
    band_low: f64,
    band_high: f64,
    rms: f64,
    seed: u32,
) -> Result<Vec<f64>, JsError> {
    multisine_spectrum(samples_per_period, band_low, band_high, rms, seed)
        .map(|(u, _)| u)
        .map_err(js)
}

#[wasm_bindgen(js_name = linearizedResponse)]
pub fn linearized_response_js(mass: f64, stiffness: f64, damping: f64, f_max: f64, points: usize) -> Result<Response, JsError> {
    linearized_response(mass, stiffness, damping, f_max, points).map_err(js)
}
