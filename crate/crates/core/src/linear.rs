//! Discrete-time SISO linear state-space model.

use nalgebra::{Complex, DMatrix, DVector};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `x(t+1) = A x(t) + b u(t)`, `y(t) = c·x(t) + d u(t)`.
///
/// The model acts on scaled signals: the raw input is divided by
/// `input_scale` before entering the recursion and the model output is
/// multiplied by `output_scale`. Both default to one; identification uses
/// them so that states, input and output are all of order one internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LinearModelRepr", into = "LinearModelRepr")]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DVector<f64>,
    pub d: f64,
    pub fs: f64,
    pub input_scale: f64,
    pub output_scale: f64,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>, c: DVector<f64>, d: f64, fs: f64) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(Error::InvalidOrder(0));
        }
        if a.ncols() != n || b.len() != n || c.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "A is {}x{}, b has {}, c has {}",
                a.nrows(),
                a.ncols(),
                b.len(),
                c.len()
            )));
        }
        if !(fs > 0.0) {
            return Err(Error::Misconfiguration("sampling frequency must be positive".into()));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            fs,
            input_scale: 1.0,
            output_scale: 1.0,
        })
    }

    pub fn with_scaling(mut self, input_scale: f64, output_scale: f64) -> Self {
        self.input_scale = input_scale;
        self.output_scale = output_scale;
        self
    }

    pub fn order(&self) -> usize {
        self.a.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    pub fn is_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    pub fn ensure_stable(&self) -> Result<()> {
        let rho = self.spectral_radius();
        if rho < 1.0 {
            Ok(())
        } else {
            Err(Error::Unstable(rho))
        }
    }

    /// Frequency response in raw units at the given frequencies (Hz).
    pub fn frf(&self, freqs: &[f64]) -> Vec<Complex64> {
        let gain = self.output_scale / self.input_scale;
        freqs
            .iter()
            .map(|&f| {
                let z = Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f / self.fs);
                transfer_at(&self.a, &self.b, &self.c, self.d, z) * gain
            })
            .collect()
    }

    /// Simulates from zero initial state; input and output in raw units.
    pub fn simulate(&self, u: &[f64]) -> Vec<f64> {
        let n = self.order();
        let mut x = DVector::zeros(n);
        let mut next = DVector::zeros(n);
        let mut y = Vec::with_capacity(u.len());
        for &ut in u {
            let us = ut / self.input_scale;
            y.push((self.c.dot(&x) + self.d * us) * self.output_scale);
            next.gemv(1.0, &self.a, &x, 0.0);
            next.axpy(us, &self.b, 1.0);
            std::mem::swap(&mut x, &mut next);
        }
        y
    }

    /// Applies the state transformation `x' = T x`.
    pub fn transform_states(&self, t: &DMatrix<f64>) -> Result<Self> {
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Misconfiguration("singular state transformation".into()))?;
        Ok(Self {
            a: t * &self.a * &t_inv,
            b: t * &self.b,
            c: t_inv.transpose() * &self.c,
            ..self.clone()
        })
    }

    /// Re-expresses the model for a different pair of signal scales while
    /// keeping the raw input-output behaviour.
    pub fn rescaled(&self, input_scale: f64, output_scale: f64) -> Self {
        let ki = input_scale / self.input_scale;
        let ko = self.output_scale / output_scale;
        Self {
            a: self.a.clone(),
            b: &self.b * ki,
            c: &self.c * ko,
            d: self.d * ki * ko,
            fs: self.fs,
            input_scale,
            output_scale,
        }
    }

    pub fn parameter_count(&self) -> usize {
        let n = self.order();
        n * n + 2 * n + 1
    }
}

/// `c (zI - A)^{-1} b + d` on the internal (scaled) signals.
pub fn transfer_at(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, d: f64, z: Complex64) -> Complex64 {
    let n = a.nrows();
    let m = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
        let diag = if i == j { z } else { Complex::new(0.0, 0.0) };
        diag - Complex::new(a[(i, j)], 0.0)
    });
    let rhs = DVector::<Complex<f64>>::from_fn(n, |i, _| Complex::new(b[i], 0.0));
    match m.lu().solve(&rhs) {
        Some(x) => {
            let s: Complex<f64> = (0..n).map(|i| x[i] * c[i]).sum();
            s + d
        }
        None => Complex64::new(f64::INFINITY, 0.0),
    }
}

pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max)
}

#[derive(Serialize, Deserialize)]
struct LinearModelRepr {
    order: usize,
    fs: f64,
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    #[serde(default = "one")]
    input_scale: f64,
    #[serde(default = "one")]
    output_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl From<LinearModel> for LinearModelRepr {
    fn from(m: LinearModel) -> Self {
        Self {
            order: m.order(),
            fs: m.fs,
            a: matrix_rows(&m.a),
            b: m.b.iter().copied().collect(),
            c: m.c.iter().copied().collect(),
            d: m.d,
            input_scale: m.input_scale,
            output_scale: m.output_scale,
        }
    }
}

impl TryFrom<LinearModelRepr> for LinearModel {
    type Error = Error;

    fn try_from(r: LinearModelRepr) -> Result<Self> {
        let a = matrix_from_rows(&r.a, r.order, r.order)?;
        let m = LinearModel::new(
            a,
            DVector::from_vec(r.b),
            DVector::from_vec(r.c),
            r.d,
            r.fs,
        )?;
        Ok(m.with_scaling(r.input_scale, r.output_scale))
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::ShapeMismatch(format!(
            "expected a {nrows}x{ncols} matrix"
        )));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Serde adapter storing a matrix as a list of rows.
pub(crate) mod rows_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        (m.nrows(), m.ncols(), super::matrix_rows(m)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let (r, c, rows) = <(usize, usize, Vec<Vec<f64>>)>::deserialize(d)?;
        if r == 0 || c == 0 {
            return Ok(DMatrix::zeros(r, c));
        }
        super::matrix_from_rows(&rows, r, c).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LinearModel {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.2, -0.1, 0.3]);
        LinearModel::new(a, DVector::from_vec(vec![1.0, 0.5]), DVector::from_vec(vec![0.3, -1.0]), 0.1, 10.0)
            .unwrap()
    }

    #[test]
    fn impulse_response_matches_markov_parameters() {
        let m = toy();
        let mut u = vec![0.0; 5];
        u[0] = 1.0;
        let y = m.simulate(&u);
        assert!((y[0] - 0.1).abs() < 1e-15);
        assert!((y[1] - m.c.dot(&m.b)).abs() < 1e-15);
        assert!((y[2] - m.c.dot(&(&m.a * &m.b))).abs() < 1e-15);
    }

    #[test]
    fn dc_gain_matches_steady_state() {
        let m = toy();
        let y = m.simulate(&[1.0; 400]);
        let g = m.frf(&[0.0])[0];
        assert!((y[399] - g.re).abs() < 1e-12 && g.im.abs() < 1e-15);
    }

    #[test]
    fn similarity_and_rescaling_preserve_frf() {
        let m = toy();
        let t = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 0.5]);
        let mt = m.transform_states(&t).unwrap();
        let ms = m.rescaled(3.0, 0.25);
        let freqs = [0.3, 1.7, 4.2];
        for ((a, b), c) in m.frf(&freqs).iter().zip(mt.frf(&freqs)).zip(ms.frf(&freqs)) {
            assert!((a - b).norm() < 1e-12 && (a - c).norm() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let m = toy().with_scaling(55.0, 1e-3);
        let s = serde_json::to_string(&m).unwrap();
        let back: LinearModel = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn zero_order_rejected() {
        assert!(matches!(
            LinearModel::new(DMatrix::zeros(0, 0), DVector::zeros(0), DVector::zeros(0), 0.0, 1.0),
            Err(Error::InvalidOrder(0))
        ));
    }
}
