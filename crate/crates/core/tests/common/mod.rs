#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pnlss::boucwen::{Dataset, Split};
use pnlss::decouple::{assemble_decoupled, DecoupledModel};
use pnlss::linear::LinearModel;
use pnlss::pnlss::PnlssModel;
use pnlss::signals::{generate_multisine, MultisineSpec, Signal, SignalSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FS: f64 = 100.0;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable second-order linear part: a damped rotation with radius 0.9.
pub fn linear2() -> LinearModel {
    let (r, th): (f64, f64) = (0.9, 0.4);
    let a = DMatrix::from_row_slice(2, 2, &[r * th.cos(), -r * th.sin(), r * th.sin(), r * th.cos()]);
    LinearModel::new(a, DVector::from_vec(vec![0.6, 0.3]), DVector::from_vec(vec![0.8, -0.5]), 0.1, FS).unwrap()
}

/// PNLSS on `linear2` with the given degrees and coefficients uniform in
/// `±amp`.
pub fn random_pnlss(degrees: &[u32], amp: f64, seed: u64) -> PnlssModel {
    let mut m = PnlssModel::from_linear(linear2(), degrees, degrees).unwrap();
    let mut g = rng(seed);
    for v in m.e.iter_mut() {
        *v = g.random_range(-amp..amp);
    }
    for v in m.f.iter_mut() {
        *v = g.random_range(-amp..amp);
    }
    m
}

/// Decoupled model on `linear2` with `r` branches of degree `d`.
pub fn random_decoupled(r: usize, d: usize, seed: u64) -> DecoupledModel {
    let mut g = rng(seed);
    let v = DMatrix::from_fn(3, r, |_, _| g.random_range(-1.0..1.0));
    let w = DMatrix::from_fn(3, r, |_, _| g.random_range(-0.1..0.1));
    let c = DMatrix::from_fn(r, d - 1, |_, _| g.random_range(-0.3..0.3));
    assemble_decoupled(linear2(), v, w, c, d).unwrap()
}

pub fn multisine(ns: usize, periods: usize, rms: f64, seed: u64) -> Signal {
    generate_multisine(&MultisineSpec {
        samples_per_period: ns,
        sampling_frequency: FS,
        band_low: 0.5,
        band_high: 30.0,
        target_rms: rms,
        period_count: periods,
        seed,
    })
    .unwrap()
}

/// Steady-state periodic record of `simulate` driven by `u`; ten periods are
/// run first and discarded.
pub fn periodic_record(simulate: impl Fn(&[f64]) -> Vec<f64>, u: Signal, ns: usize, split: Split) -> Dataset {
    let transient = 10;
    let mut ext = Vec::with_capacity(u.len() + transient * ns);
    for _ in 0..transient {
        ext.extend_from_slice(&u.samples[..ns]);
    }
    ext.extend_from_slice(&u.samples);
    let y = simulate(&ext);
    let y = Signal::new(y[transient * ns..].to_vec(), u.sampling_frequency, SignalSource::Simulated).unwrap();
    Dataset::new(u, y, split, Some(ns)).unwrap()
}

/// Largest relative column difference between `a` and the reference `b`.
/// Columns far below the average column norm are compared against that
/// average instead of their own norm.
pub fn worst_column_error(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = b.norm() / (b.ncols() as f64).sqrt();
    (0..a.ncols())
        .map(|j| (a.column(j) - b.column(j)).norm() / b.column(j).norm().max(1e-3 * scale))
        .fold(0.0, f64::max)
}
