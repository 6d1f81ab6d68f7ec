//! Polynomial nonlinear state-space models.
//!
//! ```text
//! x(t+1) = A x(t) + b u(t) + E ζ(x(t), u(t))
//! y(t)   = c·x(t) + d u(t) + f·η(x(t), u(t))
//! ```
//!
//! `ζ` and `η` hold every monomial in `(x_1, …, x_n, u)` whose total degree
//! is in the configured degree set.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boucwen::Dataset;
use crate::error::{misconfig, Error, Result};
use crate::linear::{matrix_from_rows, matrix_rows, LinearModel};
use crate::lm::{levenberg_marquardt, LmOptions};
use crate::sim::{OutputErrorProblem, SensitivityModel, TrainReport, DIVERGENCE_LIMIT};

/// Number of nonlinear coefficients of a full PNLSS model with all degrees
/// `2..=d` in both the state and the output equation.
pub fn monomial_count(n: usize, d: usize) -> usize {
    let total = binomial(n + 1 + d, d);
    (total - n - 2) * (n + 1)
}

pub(crate) fn binomial(n: usize, k: usize) -> usize {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Canonically ordered set of monomials in `variable_count` variables.
///
/// Order: ascending total degree, then descending lexicographic exponent
/// vectors, so for `(x1, x2, u)` at degree two the order is
/// `x1², x1x2, x1u, x2², x2u, u²`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BasisRepr", into = "BasisRepr")]
pub struct MonomialBasis {
    variable_count: usize,
    degrees: Vec<u32>,
    exponents: Vec<Vec<u32>>,
}

impl MonomialBasis {
    pub fn new(variable_count: usize, degrees: &[u32]) -> Result<Self> {
        if variable_count == 0 {
            return Err(misconfig("a monomial basis needs at least one variable"));
        }
        let mut degrees = degrees.to_vec();
        degrees.sort_unstable();
        degrees.dedup();
        if degrees.iter().any(|&d| d < 2) {
            return Err(misconfig("monomial degrees must be >= 2"));
        }
        let mut exponents = Vec::new();
        for &d in &degrees {
            let mut current = vec![0; variable_count];
            enumerate_degree(d, 0, &mut current, &mut exponents);
        }
        Ok(Self {
            variable_count,
            degrees,
            exponents,
        })
    }

    pub fn empty(variable_count: usize) -> Self {
        Self {
            variable_count,
            degrees: Vec::new(),
            exponents: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn variable_count(&self) -> usize {
        self.variable_count
    }

    pub fn degrees(&self) -> &[u32] {
        &self.degrees
    }

    pub fn exponents(&self) -> &[Vec<u32>] {
        &self.exponents
    }

    pub fn max_degree(&self) -> u32 {
        self.degrees.last().copied().unwrap_or(0)
    }

    pub fn evaluate(&self, point: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        let powers = Powers::new(point, self.max_degree());
        self.evaluate_with(&powers, &mut out);
        out
    }

    pub(crate) fn evaluate_with(&self, powers: &Powers, out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.exponents) {
            *o = e
                .iter()
                .enumerate()
                .map(|(v, &p)| powers.get(v, p))
                .product();
        }
    }

    /// `out[(j, v)] = ∂ monomial_j / ∂ variable_v`.
    pub(crate) fn jacobian_with(&self, powers: &Powers, out: &mut DMatrix<f64>) {
        for (j, e) in self.exponents.iter().enumerate() {
            for v in 0..self.variable_count {
                out[(j, v)] = if e[v] == 0 {
                    0.0
                } else {
                    let mut prod = e[v] as f64 * powers.get(v, e[v] - 1);
                    for (w, &p) in e.iter().enumerate() {
                        if w != v {
                            prod *= powers.get(w, p);
                        }
                    }
                    prod
                };
            }
        }
    }

    /// Position of an exponent vector in the canonical order.
    pub fn index_of(&self, exponent: &[u32]) -> Option<usize> {
        self.exponents.iter().position(|e| e == exponent)
    }
}

fn enumerate_degree(remaining: u32, var: usize, current: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if var + 1 == current.len() {
        current[var] = remaining;
        out.push(current.clone());
        return;
    }
    for e in (0..=remaining).rev() {
        current[var] = e;
        enumerate_degree(remaining - e, var + 1, current, out);
    }
    current[var] = 0;
}

/// Table of `point[v]^p` for `p <= max_degree`.
pub(crate) struct Powers {
    stride: usize,
    table: Vec<f64>,
}

impl Powers {
    pub(crate) fn new(point: &[f64], max_degree: u32) -> Self {
        let stride = max_degree as usize + 1;
        let mut table = vec![1.0; point.len() * stride];
        for (v, &s) in point.iter().enumerate() {
            for p in 1..stride {
                table[v * stride + p] = table[v * stride + p - 1] * s;
            }
        }
        Self { stride, table }
    }

    #[inline]
    pub(crate) fn get(&self, var: usize, power: u32) -> f64 {
        self.table[var * self.stride + power as usize]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BasisRepr {
    variable_count: usize,
    degrees: Vec<u32>,
    exponents: Vec<Vec<u32>>,
}

impl From<MonomialBasis> for BasisRepr {
    fn from(b: MonomialBasis) -> Self {
        Self {
            variable_count: b.variable_count,
            degrees: b.degrees,
            exponents: b.exponents,
        }
    }
}

impl TryFrom<BasisRepr> for MonomialBasis {
    type Error = Error;

    fn try_from(r: BasisRepr) -> Result<Self> {
        let basis = if r.degrees.is_empty() {
            MonomialBasis::empty(r.variable_count)
        } else {
            MonomialBasis::new(r.variable_count, &r.degrees)?
        };
        if basis.exponents != r.exponents {
            return Err(misconfig("exponent table is not in canonical order"));
        }
        Ok(basis)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PnlssRepr", into = "PnlssRepr")]
pub struct PnlssModel {
    pub linear: LinearModel,
    pub state_basis: MonomialBasis,
    pub output_basis: MonomialBasis,
    /// `n × n_ζ`
    pub e: DMatrix<f64>,
    /// `n_η`
    pub f: DVector<f64>,
}

impl PnlssModel {
    pub fn new(
        linear: LinearModel,
        state_basis: MonomialBasis,
        output_basis: MonomialBasis,
        e: DMatrix<f64>,
        f: DVector<f64>,
    ) -> Result<Self> {
        let n = linear.order();
        for basis in [&state_basis, &output_basis] {
            if basis.variable_count() != n + 1 {
                return Err(Error::ShapeMismatch(format!(
                    "basis over {} variables for a model with {} states and one input",
                    basis.variable_count(),
                    n
                )));
            }
        }
        if e.nrows() != n || e.ncols() != state_basis.len() {
            return Err(Error::ShapeMismatch(format!(
                "E is {}x{}, expected {}x{}",
                e.nrows(),
                e.ncols(),
                n,
                state_basis.len()
            )));
        }
        if f.len() != output_basis.len() {
            return Err(Error::ShapeMismatch(format!(
                "f has {} entries, expected {}",
                f.len(),
                output_basis.len()
            )));
        }
        Ok(Self {
            linear,
            state_basis,
            output_basis,
            e,
            f,
        })
    }

    /// Linear model extended with zero nonlinear coefficients.
    pub fn from_linear(linear: LinearModel, state_degrees: &[u32], output_degrees: &[u32]) -> Result<Self> {
        let nv = linear.order() + 1;
        let basis = |d: &[u32]| {
            if d.is_empty() {
                Ok(MonomialBasis::empty(nv))
            } else {
                MonomialBasis::new(nv, d)
            }
        };
        let sb = basis(state_degrees)?;
        let ob = basis(output_degrees)?;
        let e = DMatrix::zeros(linear.order(), sb.len());
        let f = DVector::zeros(ob.len());
        Self::new(linear, sb, ob, e, f)
    }

    pub fn order(&self) -> usize {
        self.linear.order()
    }

    pub fn nonlinear_parameter_count(&self) -> usize {
        self.e.len() + self.f.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.linear.parameter_count() + self.nonlinear_parameter_count()
    }

    /// Simulates from zero state on raw input; returns raw output.
    pub fn simulate(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut y = Vec::with_capacity(u.len());
        self.run(u, |_, yt| y.push(yt))?;
        Ok(y)
    }

    /// State trajectory (internal coordinates) and the scaled input.
    pub fn simulate_states(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut states = Vec::with_capacity(u.len());
        self.run(u, |s, _| states.push(s.to_vec()))?;
        Ok(states)
    }

    /// Calls `visit(point, y)` for every sample, where `point` is
    /// `(x_1..x_n, u)` in internal coordinates and `y` is the raw output.
    fn run(&self, u: &[f64], mut visit: impl FnMut(&[f64], f64)) -> Result<()> {
        let n = self.order();
        let lin = &self.linear;
        let max_deg = self.state_basis.max_degree().max(self.output_basis.max_degree());
        let mut point = vec![0.0; n + 1];
        let mut zeta = vec![0.0; self.state_basis.len()];
        let mut eta = vec![0.0; self.output_basis.len()];
        let mut next = vec![0.0; n];
        for (t, &ut) in u.iter().enumerate() {
            let us = ut / lin.input_scale;
            point[n] = us;
            let powers = Powers::new(&point, max_deg);
            self.state_basis.evaluate_with(&powers, &mut zeta);
            self.output_basis.evaluate_with(&powers, &mut eta);
            let mut yt = lin.d * us;
            for i in 0..n {
                yt += lin.c[i] * point[i];
            }
            for (fj, ej) in self.f.iter().zip(&eta) {
                yt += fj * ej;
            }
            visit(&point, yt * lin.output_scale);
            for i in 0..n {
                let mut acc = lin.b[i] * us;
                for j in 0..n {
                    acc += lin.a[(i, j)] * point[j];
                }
                for (k, z) in zeta.iter().enumerate() {
                    acc += self.e[(i, k)] * z;
                }
                next[i] = acc;
            }
            if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return Err(Error::Divergence { index: t + 1 });
            }
            point[..n].copy_from_slice(&next);
        }
        Ok(())
    }

    /// Parameters flattened as `[A (row-major), b, c, d, E (row-major), f]`.
    pub fn parameters(&self) -> Vec<f64> {
        let lin = &self.linear;
        let mut p = Vec::with_capacity(self.parameter_count());
        p.extend(matrix_rows(&lin.a).into_iter().flatten());
        p.extend(lin.b.iter());
        p.extend(lin.c.iter());
        p.push(lin.d);
        p.extend(matrix_rows(&self.e).into_iter().flatten());
        p.extend(self.f.iter());
        p
    }

    pub fn with_parameters(&self, theta: &[f64]) -> Self {
        let n = self.order();
        let nz = self.state_basis.len();
        let mut it = theta.iter().copied();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let a = DMatrix::from_row_slice(n, n, &take(n * n));
        let b = DVector::from_vec(take(n));
        let c = DVector::from_vec(take(n));
        let d = take(1)[0];
        let e = DMatrix::from_row_slice(n, nz, &take(n * nz));
        let f = DVector::from_vec(take(self.output_basis.len()));
        let mut model = self.clone();
        model.linear.a = a;
        model.linear.b = b;
        model.linear.c = c;
        model.linear.d = d;
        model.e = e;
        model.f = f;
        model
    }
}

impl SensitivityModel for PnlssModel {
    fn parameter_vector(&self) -> Vec<f64> {
        self.parameters()
    }

    fn simulate_scaled(&self, theta: &[f64], u: &[f64]) -> Option<Vec<f64>> {
        let m = self.with_parameters(theta);
        let mut raw = m.clone();
        raw.linear.input_scale = 1.0;
        raw.linear.output_scale = 1.0;
        raw.simulate(u).ok()
    }

    fn simulate_with_sensitivity(&self, theta: &[f64], u: &[f64], skip: usize) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let m = self.with_parameters(theta);
        let n = m.order();
        let nz = m.state_basis.len();
        let ne = m.output_basis.len();
        let np = theta.len();
        let (off_b, off_c) = (n * n, n * n + n);
        let off_d = off_c + n;
        let off_e = off_d + 1;
        let off_f = off_e + n * nz;
        let rows = u.len().saturating_sub(skip);

        let lin = &m.linear;
        let max_deg = m.state_basis.max_degree().max(m.output_basis.max_degree());
        let mut jac = DMatrix::zeros(rows, np);
        let mut y = Vec::with_capacity(rows);
        let mut sens = DMatrix::<f64>::zeros(n, np);
        let mut sens_next = DMatrix::<f64>::zeros(n, np);
        let mut point = vec![0.0; n + 1];
        let mut zeta = vec![0.0; nz];
        let mut eta = vec![0.0; ne];
        let mut dzeta = DMatrix::zeros(nz, n + 1);
        let mut deta = DMatrix::zeros(ne, n + 1);
        let mut feedback = DMatrix::<f64>::zeros(n, n);
        let mut out_grad = DVector::<f64>::zeros(n);
        let mut row = DVector::<f64>::zeros(np);
        let mut next = vec![0.0; n];

        for (t, &ut) in u.iter().enumerate() {
            point[n] = ut;
            let powers = Powers::new(&point, max_deg);
            m.state_basis.evaluate_with(&powers, &mut zeta);
            m.output_basis.evaluate_with(&powers, &mut eta);
            m.state_basis.jacobian_with(&powers, &mut dzeta);
            m.output_basis.jacobian_with(&powers, &mut deta);

            if t >= skip {
                let mut yt = lin.d * ut;
                for i in 0..n {
                    yt += lin.c[i] * point[i];
                }
                for (fj, ej) in m.f.iter().zip(&eta) {
                    yt += fj * ej;
                }
                y.push(yt);
                // ∂y/∂x = c + Dηᵀ f
                for i in 0..n {
                    let mut g = lin.c[i];
                    for j in 0..ne {
                        g += deta[(j, i)] * m.f[j];
                    }
                    out_grad[i] = g;
                }
                row.gemv_tr(1.0, &sens, &out_grad, 0.0);
                for i in 0..n {
                    row[off_c + i] += point[i];
                }
                row[off_d] += ut;
                for j in 0..ne {
                    row[off_f + j] += eta[j];
                }
                jac.row_mut(t - skip).copy_from(&row.transpose());
            }

            // Feedback matrix A + E Dζ_x
            for i in 0..n {
                for j in 0..n {
                    let mut v = lin.a[(i, j)];
                    for k in 0..nz {
                        v += m.e[(i, k)] * dzeta[(k, j)];
                    }
                    feedback[(i, j)] = v;
                }
            }
            sens_next.gemm(1.0, &feedback, &sens, 0.0);
            for i in 0..n {
                for j in 0..n {
                    sens_next[(i, i * n + j)] += point[j];
                }
                sens_next[(i, off_b + i)] += ut;
                for k in 0..nz {
                    sens_next[(i, off_e + i * nz + k)] += zeta[k];
                }
            }
            for i in 0..n {
                let mut acc = lin.b[i] * ut;
                for j in 0..n {
                    acc += lin.a[(i, j)] * point[j];
                }
                for k in 0..nz {
                    acc += m.e[(i, k)] * zeta[k];
                }
                next[i] = acc;
            }
            if next.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                return None;
            }
            point[..n].copy_from_slice(&next);
            std::mem::swap(&mut sens, &mut sens_next);
        }
        if jac.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((y, jac))
    }

    fn linear(&self) -> &LinearModel {
        &self.linear
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct TrainOptions {
    pub lm: LmOptions,
    /// Per-DFT-line weights over one period (length `Ns`); `None` for an
    /// unweighted time-domain cost.
    #[serde(default)]
    pub frequency_weights: Option<Vec<f64>>,
}


/// Output-error Levenberg-Marquardt over all of `A, b, c, d, E, f`.
pub fn train_pnlss(
    init: &PnlssModel,
    train: &Dataset,
    validation: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<(PnlssModel, TrainReport)> {
    let problem = OutputErrorProblem::new(init, train, validation, opts.frequency_weights.as_deref())?;
    let outcome = levenberg_marquardt(&problem, &init.parameters(), &opts.lm)?;
    let model = init.with_parameters(&outcome.theta);
    let report = problem.report(&model, &outcome);
    Ok((model, report))
}

#[derive(Serialize, Deserialize)]
struct PnlssRepr {
    linear: LinearModel,
    state_basis: MonomialBasis,
    output_basis: MonomialBasis,
    e: Vec<Vec<f64>>,
    f: Vec<f64>,
}

impl From<PnlssModel> for PnlssRepr {
    fn from(m: PnlssModel) -> Self {
        Self {
            e: matrix_rows(&m.e),
            f: m.f.iter().copied().collect(),
            linear: m.linear,
            state_basis: m.state_basis,
            output_basis: m.output_basis,
        }
    }
}

impl TryFrom<PnlssRepr> for PnlssModel {
    type Error = Error;

    fn try_from(r: PnlssRepr) -> Result<Self> {
        let n = r.linear.order();
        let e = if r.state_basis.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            matrix_from_rows(&r.e, n, r.state_basis.len())?
        };
        PnlssModel::new(r.linear, r.state_basis, r.output_basis, e, DVector::from_vec(r.f))
    }
}
