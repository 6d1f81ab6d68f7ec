//! Best linear approximation from periodic multisine records and the
//! linear state-space initialisation fitted to it.
//!
//! The realisation step is a frequency-domain subspace method that works on
//! an arbitrary set of frequency lines, so it can consume the BLA directly on
//! the excited band without interpolating the unexcited lines.

use nalgebra::{Complex, DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::boucwen::Dataset;
use crate::error::{misconfig, Error, Result};
use crate::linear::{spectral_radius, LinearModel};
use crate::lm::{levenberg_marquardt, LeastSquares, LmOptions};
use crate::signals::{dft, line_frequency, rms};
use crate::sim::output_error;

/// Lines whose input amplitude is below this fraction of the largest one
/// count as unexcited.
const EXCITATION_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrfEstimate {
    pub frequencies: Vec<f64>,
    /// Serialised as `[re, im]` pairs.
    #[serde(with = "complex_pairs")]
    pub g: Vec<Complex64>,
    /// Variance of `g` (sample variance over realizations divided by `M`).
    pub sigma2: Vec<f64>,
    pub sampling_frequency: f64,
    pub realization_count: usize,
    pub period_count: usize,
    /// Mean time-domain rms of the records the estimate came from; used to
    /// normalise the fitted model.
    pub input_rms: f64,
    pub output_rms: f64,
}

mod complex_pairs {
    use rustfft::num_complex::Complex64;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Complex64], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|c| [c.re, c.im]).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Complex64>, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(d)?;
        Ok(pairs.into_iter().map(|[re, im]| Complex64::new(re, im)).collect())
    }
}

impl FrfEstimate {
    /// Estimate with unit signal scales, e.g. synthesised from a model.
    pub fn new(frequencies: Vec<f64>, g: Vec<Complex64>, sigma2: Vec<f64>, sampling_frequency: f64) -> Result<Self> {
        let est = Self {
            frequencies,
            g,
            sigma2,
            sampling_frequency,
            realization_count: 1,
            period_count: 1,
            input_rms: 1.0,
            output_rms: 1.0,
        };
        est.validate()?;
        Ok(est)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frequencies.len() != self.g.len() || self.g.len() != self.sigma2.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frequencies, {} FRF values, {} variances",
                self.frequencies.len(),
                self.g.len(),
                self.sigma2.len()
            )));
        }
        if self.sigma2.iter().any(|v| !(*v >= 0.0)) {
            return Err(misconfig("FRF variances must be non-negative"));
        }
        if !(self.sampling_frequency > 0.0) {
            return Err(misconfig("sampling frequency must be positive"));
        }
        if !(self.input_rms > 0.0 && self.output_rms > 0.0) {
            return Err(misconfig("signal scales must be positive"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }
}

/// Period-averaged spectra of one record on its excited lines.
fn realization_frf(data: &Dataset) -> Result<(Vec<usize>, Vec<Complex64>)> {
    let ns = data
        .period
        .ok_or_else(|| misconfig("the BLA needs records in periodic steady state"))?;
    let p = data.period_count();
    let mut u_avg = vec![Complex64::new(0.0, 0.0); ns];
    let mut y_avg = vec![Complex64::new(0.0, 0.0); ns];
    for k in 0..p {
        let range = k * ns..(k + 1) * ns;
        for (acc, v) in u_avg.iter_mut().zip(dft(&data.u.samples[range.clone()])) {
            *acc += v / p as f64;
        }
        for (acc, v) in y_avg.iter_mut().zip(dft(&data.y.samples[range])) {
            *acc += v / p as f64;
        }
    }
    let half = &u_avg[1..ns / 2];
    let peak = half.iter().fold(0.0f64, |m, v| m.max(v.norm()));
    if peak == 0.0 {
        return Err(misconfig("record has no excited lines"));
    }
    let lines: Vec<usize> = (1..ns / 2)
        .filter(|&k| u_avg[k].norm() > EXCITATION_THRESHOLD * peak)
        .collect();
    let g = lines.iter().map(|&k| y_avg[k] / u_avg[k]).collect();
    Ok((lines, g))
}

/// Averages the FRF over periods and then over realizations.
pub fn estimate_bla(datasets: &[Dataset]) -> Result<FrfEstimate> {
    let first = datasets
        .first()
        .ok_or_else(|| misconfig("at least one realization is required"))?;
    let fs = first.fs();
    let ns = first.period.unwrap_or(0);
    let (lines, _) = realization_frf(first)?;
    let mut per_real = Vec::with_capacity(datasets.len());
    let mut u_rms = 0.0;
    let mut y_rms = 0.0;
    for d in datasets {
        if d.fs() != fs || d.period != Some(ns) || d.period_count() != first.period_count() {
            return Err(misconfig("realizations differ in sampling rate, period or period count"));
        }
        let (l, g) = realization_frf(d)?;
        if l != lines {
            return Err(misconfig("realizations excite different frequency lines"));
        }
        per_real.push(g);
        u_rms += rms(&d.u.samples);
        y_rms += rms(&d.y.samples);
    }
    let m = datasets.len() as f64;
    let g: Vec<Complex64> = (0..lines.len())
        .map(|k| per_real.iter().map(|r| r[k]).sum::<Complex64>() / m)
        .collect();
    let sigma2 = (0..lines.len())
        .map(|k| {
            if datasets.len() < 2 {
                return 0.0;
            }
            let var = per_real.iter().map(|r| (r[k] - g[k]).norm_sqr()).sum::<f64>() / (m - 1.0);
            var / m
        })
        .collect();
    let est = FrfEstimate {
        frequencies: lines.iter().map(|&k| line_frequency(k, ns, fs)).collect(),
        g,
        sigma2,
        sampling_frequency: fs,
        realization_count: datasets.len(),
        period_count: first.period_count(),
        input_rms: u_rms / m,
        output_rms: y_rms / m,
    };
    est.validate()?;
    Ok(est)
}

/// Per-line weights `1/σ²`, with `σ²` floored relative to the FRF peak.
/// With all variances zero the weights are uniform.
fn line_weights(frf: &FrfEstimate, g: &[Complex64]) -> Vec<f64> {
    let peak = g.iter().fold(0.0f64, |m, v| m.max(v.norm_sqr()));
    let floor = (1e-12 * peak).max(f64::MIN_POSITIVE);
    let w: Vec<f64> = frf.sigma2.iter().map(|s| 1.0 / s.max(floor)).collect();
    let max = w.iter().fold(0.0f64, |m, v| m.max(*v));
    w.iter().map(|v| v / max).collect()
}

fn unit_phasors(frf: &FrfEstimate) -> Vec<Complex64> {
    frf.frequencies
        .iter()
        .map(|f| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * f / frf.sampling_frequency))
        .collect()
}

/// Rows `(z_k I - A)^{-1}` applied from the left by `c`, and `(z_k I - A)^{-1} b`.
fn resolvent_terms(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, z: Complex64) -> Option<(Vec<Complex64>, Vec<Complex64>)> {
    let n = a.nrows();
    let m = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
        let diag = if i == j { z } else { Complex64::new(0.0, 0.0) };
        diag - a[(i, j)]
    });
    let lu = m.lu();
    let xb = lu.solve(&b.map(|v| Complex64::new(v, 0.0)))?;
    let mt = DMatrix::<Complex<f64>>::from_fn(n, n, |i, j| {
        let diag = if i == j { z } else { Complex64::new(0.0, 0.0) };
        diag - a[(j, i)]
    });
    let cx = mt.lu().solve(&c.map(|v| Complex64::new(v, 0.0)))?;
    Some((cx.iter().copied().collect(), xb.iter().copied().collect()))
}

/// Weighted least squares for `b` and `d` with `A` and `c` held fixed.
fn fit_b_d(
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    z: &[Complex64],
    g: &[Complex64],
    w: &[f64],
) -> Result<(DVector<f64>, f64)> {
    let n = a.nrows();
    let rows = 2 * z.len();
    let mut phi = DMatrix::zeros(rows, n + 1);
    let mut rhs = DVector::zeros(rows);
    let dummy = DVector::zeros(n);
    for (k, &zk) in z.iter().enumerate() {
        let (cx, _) = resolvent_terms(a, &dummy, c, zk).ok_or_else(|| misconfig("A has an eigenvalue on an excited line"))?;
        let sw = w[k].sqrt();
        for j in 0..n {
            phi[(2 * k, j)] = sw * cx[j].re;
            phi[(2 * k + 1, j)] = sw * cx[j].im;
        }
        phi[(2 * k, n)] = sw;
        rhs[2 * k] = sw * g[k].re;
        rhs[2 * k + 1] = sw * g[k].im;
    }
    let sol = phi
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| misconfig(format!("least-squares solve failed: {e}")))?;
    Ok((sol.rows(0, n).into_owned(), sol[n]))
}

/// Frequency-domain subspace realisation of order `n` on normalised data.
fn subspace_realization(
    n: usize,
    z: &[Complex64],
    g: &[Complex64],
    w: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, f64)> {
    let f = z.len();
    let q = (2 * n).max(n + 2);
    if 2 * f < 2 * q {
        return Err(Error::OrderTooHigh { order: n, rank: f });
    }
    // [U; G] with the realified frequency columns, then an LQ factorisation.
    let mut stacked = DMatrix::zeros(2 * f, 2 * q);
    for (k, &zk) in z.iter().enumerate() {
        let mut zp = Complex64::new(1.0, 0.0);
        for i in 0..q {
            let u = zp;
            let y = zp * g[k];
            stacked[(2 * k, i)] = u.re;
            stacked[(2 * k + 1, i)] = u.im;
            stacked[(2 * k, q + i)] = y.re;
            stacked[(2 * k + 1, q + i)] = y.im;
            zp *= zk;
        }
    }
    let r = stacked.qr().r();
    let l22 = r.view((q, q), (q, q)).transpose();
    let svd = l22.svd(true, false);
    let u = svd.u.ok_or_else(|| misconfig("SVD failed"))?;
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s_max = svd.singular_values[order[0]];
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > 1e-12 * s_max)
        .count();
    if s_max == 0.0 || rank < n {
        return Err(Error::OrderTooHigh { order: n, rank });
    }
    let obs = DMatrix::from_fn(q, n, |i, j| u[(i, order[j])]);
    let upper = obs.rows(0, q - 1).into_owned();
    let lower = obs.rows(1, q - 1).into_owned();
    let a = upper
        .svd(true, true)
        .solve(&lower, 1e-14)
        .map_err(|e| misconfig(format!("shift-invariance solve failed: {e}")))?;
    let c = obs.row(0).transpose();
    let (b, d) = fit_b_d(&a, &c, z, g, w)?;
    Ok((a, b, c, d))
}

/// Reflects eigenvalues outside the unit circle into it and refits `b`, `d`
/// for the resulting observer-canonical `(A, c)`.
fn stabilize(
    a: &DMatrix<f64>,
    z: &[Complex64],
    g: &[Complex64],
    w: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>, DVector<f64>, f64)> {
    let n = a.nrows();
    let eig: Vec<Complex64> = a
        .complex_eigenvalues()
        .iter()
        .map(|l| {
            let r = l.norm();
            let l = if r > 1.0 { l / (r * r) } else { *l };
            if l.norm() >= 1.0 - 1e-9 {
                l * ((1.0 - 1e-9) / l.norm())
            } else {
                l
            }
        })
        .collect();
    // Characteristic polynomial z^n + a_1 z^{n-1} + ... + a_n.
    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for l in &eig {
        let mut next = vec![Complex64::new(0.0, 0.0); poly.len() + 1];
        for (i, p) in poly.iter().enumerate() {
            next[i] += p;
            next[i + 1] -= p * l;
        }
        poly = next;
    }
    let mut comp = DMatrix::zeros(n, n);
    for i in 0..n {
        comp[(i, 0)] = -poly[i + 1].re;
        if i + 1 < n {
            comp[(i, i + 1)] = 1.0;
        }
    }
    let mut c = DVector::zeros(n);
    c[0] = 1.0;
    let (b, d) = fit_b_d(&comp, &c, z, g, w)?;
    Ok((comp, b, c, d))
}

/// Weighted FRF misfit over all of `(A, b, c, d)`.
struct FrfProblem<'a> {
    n: usize,
    z: &'a [Complex64],
    g: &'a [Complex64],
    sqrt_w: Vec<f64>,
}

impl FrfProblem<'_> {
    fn unpack(&self, theta: &[f64]) -> (DMatrix<f64>, DVector<f64>, DVector<f64>, f64) {
        let n = self.n;
        let a = DMatrix::from_row_slice(n, n, &theta[..n * n]);
        let b = DVector::from_column_slice(&theta[n * n..n * n + n]);
        let c = DVector::from_column_slice(&theta[n * n + n..n * n + 2 * n]);
        (a, b, c, theta[n * n + 2 * n])
    }
}

fn pack(a: &DMatrix<f64>, b: &DVector<f64>, c: &DVector<f64>, d: f64) -> Vec<f64> {
    let n = a.nrows();
    let mut theta = Vec::with_capacity(n * n + 2 * n + 1);
    for i in 0..n {
        for j in 0..n {
            theta.push(a[(i, j)]);
        }
    }
    theta.extend(b.iter());
    theta.extend(c.iter());
    theta.push(d);
    theta
}

impl LeastSquares for FrfProblem<'_> {
    fn parameter_count(&self) -> usize {
        self.n * self.n + 2 * self.n + 1
    }

    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self.jacobian(theta).map(|(r, _)| r)
    }

    fn jacobian(&self, theta: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let n = self.n;
        let (a, b, c, d) = self.unpack(theta);
        if spectral_radius(&a) >= 1.0 {
            return None;
        }
        let np = self.parameter_count();
        let mut r = Vec::with_capacity(2 * self.z.len());
        let mut jac = DMatrix::zeros(2 * self.z.len(), np);
        for (k, &zk) in self.z.iter().enumerate() {
            let (cx, xb) = resolvent_terms(&a, &b, &c, zk)?;
            let model: Complex64 = cx.iter().zip(b.iter()).map(|(x, b)| x * b).sum::<Complex64>() + d;
            let e = (model - self.g[k]) * self.sqrt_w[k];
            r.push(e.re);
            r.push(e.im);
            let sw = self.sqrt_w[k];
            let mut set = |col: usize, v: Complex64| {
                jac[(2 * k, col)] = sw * v.re;
                jac[(2 * k + 1, col)] = sw * v.im;
            };
            for i in 0..n {
                for j in 0..n {
                    set(i * n + j, cx[i] * xb[j]);
                }
                set(n * n + i, cx[i]);
                set(n * n + n + i, xb[i]);
            }
            set(n * n + 2 * n, Complex64::new(1.0, 0.0));
        }
        if r.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((r, jac))
    }
}

/// Discrete Lyapunov solution `P = A P Aᵀ + b bᵀ` by vectorisation.
fn controllability_gramian(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let kron = a.kronecker(a);
    let lhs = DMatrix::identity(n * n, n * n) - kron;
    let bb = b * b.transpose();
    let rhs = DVector::from_column_slice(bb.as_slice());
    let p = lhs.lu().solve(&rhs)?;
    let p = DMatrix::from_column_slice(n, n, p.as_slice());
    Some((&p + p.transpose()) * 0.5)
}

/// Similarity transform that makes the states uncorrelated with unit
/// variance under a white unit-variance input.
fn whiten_states(model: &LinearModel) -> LinearModel {
    let Some(p) = controllability_gramian(&model.a, &model.b) else {
        return model.clone();
    };
    let eig = SymmetricEigen::new(p);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
    if !(max > 0.0) || eig.eigenvalues.iter().any(|v| *v <= 1e-14 * max) {
        return model.clone();
    }
    let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()));
    let t = inv_sqrt * eig.eigenvectors.transpose();
    model.transform_states(&t).unwrap_or_else(|_| model.clone())
}

fn weighted_misfit(model: &LinearModel, frf: &FrfEstimate, w: &[f64]) -> f64 {
    let gm = model.frf(&frf.frequencies);
    gm.iter()
        .zip(&frf.g)
        .zip(w)
        .map(|((m, g), w)| w * (m - g).norm_sqr())
        .sum::<f64>()
}

/// Fits a stable order-`n` model to the FRF in weighted least squares.
///
/// The returned model carries `input_scale`/`output_scale` equal to the
/// estimate's signal rms values, and its states are whitened.
pub fn fit_linear_model(frf: &FrfEstimate, n: usize) -> Result<LinearModel> {
    if n == 0 {
        return Err(Error::InvalidOrder(0));
    }
    frf.validate()?;
    if frf.len() < n + 1 {
        return Err(Error::OrderTooHigh { order: n, rank: frf.len() });
    }
    let gain = frf.input_rms / frf.output_rms;
    let g: Vec<Complex64> = frf.g.iter().map(|v| v * gain).collect();
    let z = unit_phasors(frf);
    let w = line_weights(frf, &g);

    let (a, b, c, d) = subspace_realization(n, &z, &g, &w)?;
    let (a, b, c, d) = if spectral_radius(&a) < 1.0 {
        (a, b, c, d)
    } else {
        stabilize(&a, &z, &g, &w)?
    };
    let build = |a, b, c, d| {
        LinearModel::new(a, b, c, d, frf.sampling_frequency).map(|m| m.with_scaling(frf.input_rms, frf.output_rms))
    };
    let init = whiten_states(&build(a, b, c, d)?);

    let problem = FrfProblem {
        n,
        z: &z,
        g: &g,
        sqrt_w: w.iter().map(|v| v.sqrt()).collect(),
    };
    let theta0 = pack(&init.a, &init.b, &init.c, init.d);
    let refined = match levenberg_marquardt(&problem, &theta0, &LmOptions::default()) {
        Ok(out) => {
            let (a, b, c, d) = problem.unpack(&out.theta);
            Some(whiten_states(&build(a, b, c, d)?))
        }
        Err(_) => None,
    };
    let model = match refined {
        Some(m) if m.is_stable() && weighted_misfit(&m, frf, &w) <= weighted_misfit(&init, frf, &w) => m,
        _ => init,
    };
    model.ensure_stable()?;
    Ok(model)
}

/// Simulation error of a linear model on a dataset, in dB.
pub fn linear_rms_error(model: &LinearModel, test: &Dataset) -> Result<f64> {
    let e = output_error(model, test).map_err(|_| Error::Unstable(model.spectral_radius()))?;
    Ok(crate::signals::rms_db(&e))
}
