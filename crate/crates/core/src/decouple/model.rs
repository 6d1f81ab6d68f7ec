use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::boucwen::Dataset;
use crate::error::{misconfig, Error, Result};
use crate::linear::{matrix_from_rows, matrix_rows, LinearModel};
use crate::lm::levenberg_marquardt;
use crate::pnlss::{MonomialBasis, PnlssModel, TrainOptions};
use crate::sim::{OutputErrorProblem, SensitivityModel, Simulate, TrainReport, DIVERGENCE_LIMIT};

/// ```text
/// x(t+1) = A x + b u + W_x g(Vᵀ (x; u))
/// y(t)   = c·x + d u + w_y·g(Vᵀ (x; u))
/// ```
/// with `g_ℓ(s) = Σ_{p=2}^{d} coefficients[ℓ, p-2] s^p`. `W` stacks `W_x`
/// (rows `0..n`) over `w_yᵀ` (row `n`). All signals are in the linear
/// model's internal coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DecoupledRepr", into = "DecoupledRepr")]
pub struct DecoupledModel {
    pub linear: LinearModel,
    /// `(n+1) × r`
    pub v: DMatrix<f64>,
    /// `(n+1) × r`
    pub w: DMatrix<f64>,
    pub degree: usize,
    /// `r × (d−1)`, lowest power first.
    pub coefficients: DMatrix<f64>,
}

/// Builds a decoupled model after checking all shapes.
pub fn assemble_decoupled(
    linear: LinearModel,
    v: DMatrix<f64>,
    w: DMatrix<f64>,
    coefficients: DMatrix<f64>,
    degree: usize,
) -> Result<DecoupledModel> {
    let nv = linear.order() + 1;
    let r = v.ncols();
    if degree < 2 {
        return Err(misconfig("branch degree must be at least 2"));
    }
    if v.nrows() != nv || w.nrows() != nv || w.ncols() != r {
        return Err(Error::ShapeMismatch(format!(
            "V is {}x{}, W is {}x{}, expected {nv}x{r} each",
            v.nrows(),
            v.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    if coefficients.nrows() != r || coefficients.ncols() != degree - 1 {
        return Err(Error::ShapeMismatch(format!(
            "branch coefficients are {}x{}, expected {r}x{}",
            coefficients.nrows(),
            coefficients.ncols(),
            degree - 1
        )));
    }
    Ok(DecoupledModel {
        linear,
        v,
        w,
        degree,
        coefficients,
    })
}

impl DecoupledModel {
    /// Model with no branches.
    pub fn linear_only(linear: LinearModel, degree: usize) -> Result<Self> {
        let nv = linear.order() + 1;
        assemble_decoupled(linear, DMatrix::zeros(nv, 0), DMatrix::zeros(nv, 0), DMatrix::zeros(0, degree.max(2) - 1), degree.max(2))
    }

    pub fn order(&self) -> usize {
        self.linear.order()
    }

    pub fn branch_count(&self) -> usize {
        self.v.ncols()
    }

    /// `(2n + d + 1) r`
    pub fn nonlinear_parameter_count(&self) -> usize {
        self.v.len() + self.w.len() + self.coefficients.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.linear.parameter_count() + self.nonlinear_parameter_count()
    }

    /// Same model with `W = 0`; simulates exactly like its linear part.
    pub fn with_zero_w(&self) -> Self {
        let mut m = self.clone();
        m.w.fill(0.0);
        m
    }

    /// Branch value and derivative at `s`.
    pub fn branch(&self, l: usize, s: f64) -> (f64, f64) {
        let mut g = 0.0;
        let mut dg = 0.0;
        let mut pw = s; // s^(p-1)
        for (i, c) in self.coefficients.row(l).iter().enumerate() {
            let p = (i + 2) as f64;
            dg += p * c * pw;
            pw *= s;
            g += c * pw;
        }
        (g, dg)
    }

    /// Projections `s̃ = Vᵀ (x; u)` at a point.
    pub fn project(&self, point: &[f64]) -> Vec<f64> {
        (0..self.branch_count())
            .map(|l| self.v.column(l).iter().zip(point).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Simulates from zero state on raw input; returns raw output.
    pub fn simulate(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut y = Vec::with_capacity(u.len());
        self.run(u, |_, yt| y.push(yt))?;
        Ok(y)
    }

    /// `(x_1..x_n, u)` in internal coordinates for every sample.
    pub fn simulate_states(&self, u: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut states = Vec::with_capacity(u.len());
        self.run(u, |s, _| states.push(s.to_vec()))?;
        Ok(states)
    }

    fn run(&self, u: &[f64], mut visit: impl FnMut(&[f64], f64)) -> Result<()> {
        let n = self.order();
        let r = self.branch_count();
        let lin = &self.linear;
        let mut point = vec![0.0; n + 1];
        let mut g = vec![0.0; r];
        let mut next = vec![0.0; n];
        for (t, &ut) in u.iter().enumerate() {
            point[n] = ut / lin.input_scale;
            for (l, gl) in g.iter_mut().enumerate() {
                let s: f64 = self.v.column(l).iter().zip(&point).map(|(a, b)| a * b).sum();
                *gl = self.branch(l, s).0;
            }
            let mut yt = lin.d * point[n];
            for i in 0..n {
                yt += lin.c[i] * point[i];
            }
            for l in 0..r {
                yt += self.w[(n, l)] * g[l];
            }
            visit(&point, yt * lin.output_scale);
            for i in 0..n {
                let mut acc = lin.b[i] * point[n];
                for j in 0..n {
                    acc += lin.a[(i, j)] * point[j];
                }
                for l in 0..r {
                    acc += self.w[(i, l)] * g[l];
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

    /// Parameters as `[A, b, c, d, V, W, coefficients]`, matrices row-major.
    pub fn parameters(&self) -> Vec<f64> {
        let lin = &self.linear;
        let mut p = Vec::with_capacity(self.parameter_count());
        p.extend(matrix_rows(&lin.a).into_iter().flatten());
        p.extend(lin.b.iter());
        p.extend(lin.c.iter());
        p.push(lin.d);
        p.extend(matrix_rows(&self.v).into_iter().flatten());
        p.extend(matrix_rows(&self.w).into_iter().flatten());
        p.extend(matrix_rows(&self.coefficients).into_iter().flatten());
        p
    }

    pub fn with_parameters(&self, theta: &[f64]) -> Self {
        let n = self.order();
        let r = self.branch_count();
        let k = self.degree - 1;
        let mut it = theta.iter().copied();
        let mut take = |len: usize| -> Vec<f64> { it.by_ref().take(len).collect() };
        let mut m = self.clone();
        m.linear.a = DMatrix::from_row_slice(n, n, &take(n * n));
        m.linear.b = DVector::from_vec(take(n));
        m.linear.c = DVector::from_vec(take(n));
        m.linear.d = take(1)[0];
        m.v = DMatrix::from_row_slice(n + 1, r, &take((n + 1) * r));
        m.w = DMatrix::from_row_slice(n + 1, r, &take((n + 1) * r));
        m.coefficients = DMatrix::from_row_slice(r, k, &take(r * k));
        m
    }

    /// Expands the branches into full monomial bases of degrees `2..=d` in
    /// both equations.
    pub fn to_pnlss(&self) -> Result<PnlssModel> {
        let n = self.order();
        let degrees: Vec<u32> = (2..=self.degree as u32).collect();
        let basis = MonomialBasis::new(n + 1, &degrees)?;
        let mut e = DMatrix::zeros(n, basis.len());
        let mut f = DVector::zeros(basis.len());
        let factorial = |k: u32| (1..=k).map(f64::from).product::<f64>();
        for (idx, ex) in basis.exponents().iter().enumerate() {
            let p: u32 = ex.iter().sum();
            let multinomial = factorial(p) / ex.iter().map(|&k| factorial(k)).product::<f64>();
            for l in 0..self.branch_count() {
                let c = self.coefficients[(l, (p - 2) as usize)];
                if c == 0.0 {
                    continue;
                }
                let vprod: f64 = ex
                    .iter()
                    .enumerate()
                    .map(|(j, &k)| self.v[(j, l)].powi(k as i32))
                    .product();
                let term = c * multinomial * vprod;
                for i in 0..n {
                    e[(i, idx)] += self.w[(i, l)] * term;
                }
                f[idx] += self.w[(n, l)] * term;
            }
        }
        PnlssModel::new(self.linear.clone(), basis.clone(), basis, e, f)
    }
}

impl Simulate for DecoupledModel {
    fn simulate(&self, u: &[f64]) -> Result<Vec<f64>> {
        DecoupledModel::simulate(self, u)
    }
}

impl SensitivityModel for DecoupledModel {
    fn parameter_vector(&self) -> Vec<f64> {
        self.parameters()
    }

    fn simulate_scaled(&self, theta: &[f64], u: &[f64]) -> Option<Vec<f64>> {
        let mut m = self.with_parameters(theta);
        m.linear.input_scale = 1.0;
        m.linear.output_scale = 1.0;
        m.simulate(u).ok()
    }

    fn simulate_with_sensitivity(&self, theta: &[f64], u: &[f64], skip: usize) -> Option<(Vec<f64>, DMatrix<f64>)> {
        let m = self.with_parameters(theta);
        let n = m.order();
        let r = m.branch_count();
        let k = m.degree - 1;
        let np = theta.len();
        let off_b = n * n;
        let off_c = off_b + n;
        let off_d = off_c + n;
        let off_v = off_d + 1;
        let off_w = off_v + (n + 1) * r;
        let off_g = off_w + (n + 1) * r;
        let lin = &m.linear;
        let rows = u.len().saturating_sub(skip);

        let mut jac = DMatrix::zeros(rows, np);
        let mut y = Vec::with_capacity(rows);
        let mut sens = DMatrix::<f64>::zeros(n, np);
        let mut sens_next = DMatrix::<f64>::zeros(n, np);
        let mut point = vec![0.0; n + 1];
        let mut s = vec![0.0; r];
        let mut g = vec![0.0; r];
        let mut dg = vec![0.0; r];
        let mut spow = vec![0.0; k];
        let mut feedback = DMatrix::<f64>::zeros(n, n);
        let mut out_grad = DVector::<f64>::zeros(n);
        let mut row = DVector::<f64>::zeros(np);
        let mut next = vec![0.0; n];

        for (t, &ut) in u.iter().enumerate() {
            point[n] = ut;
            for l in 0..r {
                s[l] = m.v.column(l).iter().zip(&point).map(|(a, b)| a * b).sum();
                let (gl, dgl) = m.branch(l, s[l]);
                g[l] = gl;
                dg[l] = dgl;
            }

            if t >= skip {
                let mut yt = lin.d * ut;
                for i in 0..n {
                    yt += lin.c[i] * point[i];
                }
                for l in 0..r {
                    yt += m.w[(n, l)] * g[l];
                }
                y.push(yt);
                for i in 0..n {
                    let mut gi = lin.c[i];
                    for l in 0..r {
                        gi += m.w[(n, l)] * dg[l] * m.v[(i, l)];
                    }
                    out_grad[i] = gi;
                }
                row.gemv_tr(1.0, &sens, &out_grad, 0.0);
                for i in 0..n {
                    row[off_c + i] += point[i];
                }
                row[off_d] += ut;
                for l in 0..r {
                    let wy = m.w[(n, l)];
                    row[off_w + n * r + l] += g[l];
                    for j in 0..=n {
                        row[off_v + j * r + l] += wy * dg[l] * point[j];
                    }
                    let mut pw = s[l];
                    for p in 0..k {
                        pw *= s[l];
                        row[off_g + l * k + p] += wy * pw;
                    }
                }
                jac.row_mut(t - skip).copy_from(&row.transpose());
            }

            for i in 0..n {
                for j in 0..n {
                    let mut v = lin.a[(i, j)];
                    for l in 0..r {
                        v += m.w[(i, l)] * dg[l] * m.v[(j, l)];
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
            }
            for l in 0..r {
                let mut pw = s[l];
                for p in 0..k {
                    pw *= s[l];
                    spow[p] = pw;
                }
                for i in 0..n {
                    let wil = m.w[(i, l)];
                    sens_next[(i, off_w + i * r + l)] += g[l];
                    for j in 0..=n {
                        sens_next[(i, off_v + j * r + l)] += wil * dg[l] * point[j];
                    }
                    for p in 0..k {
                        sens_next[(i, off_g + l * k + p)] += wil * spow[p];
                    }
                }
            }
            for i in 0..n {
                let mut acc = lin.b[i] * ut;
                for j in 0..n {
                    acc += lin.a[(i, j)] * point[j];
                }
                for l in 0..r {
                    acc += m.w[(i, l)] * g[l];
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

/// Output-error LM over all of `A, b, c, d, V, W` and the branch
/// coefficients. An initial model that diverges on the training input is
/// replaced by the same model with `W = 0`.
pub fn train_decoupled(
    init: &DecoupledModel,
    train: &Dataset,
    validation: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<(DecoupledModel, TrainReport)> {
    let (u, _) = train.input_with_transient();
    let start = match init.simulate(&u) {
        Ok(_) => init.clone(),
        Err(Error::Divergence { index }) => {
            log::info!("initial decoupled model diverges at sample {index}; restarting from W = 0");
            init.with_zero_w()
        }
        Err(e) => return Err(e),
    };
    let problem = OutputErrorProblem::new(&start, train, validation, opts.frequency_weights.as_deref())?;
    let outcome = levenberg_marquardt(&problem, &start.parameters(), &opts.lm)?;
    let model = start.with_parameters(&outcome.theta);
    let report = problem.report(&model, &outcome);
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BranchRepr {
    min_degree: usize,
    max_degree: usize,
    coefficients: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DecoupledRepr {
    linear: LinearModel,
    branch_count: usize,
    v: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    branches: Vec<BranchRepr>,
}

impl From<DecoupledModel> for DecoupledRepr {
    fn from(m: DecoupledModel) -> Self {
        let branches = m
            .coefficients
            .row_iter()
            .map(|row| BranchRepr {
                min_degree: 2,
                max_degree: m.degree,
                coefficients: row.iter().copied().collect(),
            })
            .collect();
        Self {
            branch_count: m.branch_count(),
            v: matrix_rows(&m.v),
            w: matrix_rows(&m.w),
            branches,
            linear: m.linear,
        }
    }
}

impl TryFrom<DecoupledRepr> for DecoupledModel {
    type Error = Error;

    fn try_from(r: DecoupledRepr) -> Result<Self> {
        let nv = r.linear.order() + 1;
        let rc = r.branch_count;
        let degree = r.branches.first().map_or(2, |b| b.max_degree);
        if r.branches.len() != rc
            || r
                .branches
                .iter()
                .any(|b| b.min_degree != 2 || b.max_degree != degree || b.coefficients.len() + 1 != degree)
        {
            return Err(misconfig("branches must all cover degrees 2..=d with one coefficient per degree"));
        }
        let (v, w) = if rc == 0 {
            (DMatrix::zeros(nv, 0), DMatrix::zeros(nv, 0))
        } else {
            (matrix_from_rows(&r.v, nv, rc)?, matrix_from_rows(&r.w, nv, rc)?)
        };
        let coeffs = DMatrix::from_fn(rc, degree - 1, |l, p| r.branches[l].coefficients[p]);
        assemble_decoupled(r.linear, v, w, coeffs, degree)
    }
}
