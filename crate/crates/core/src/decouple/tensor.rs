use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{misconfig, Error, Result};
use crate::pnlss::{MonomialBasis, PnlssModel};

/// Dense third-order tensor, indexed `(i, j, k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for k in 0..dims[2] {
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    t.set(i, j, k, f(i, j, k));
                }
            }
        }
        t
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[0] + i) * self.dims[1] + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    /// Frontal slice `k` as a row-major `dims[0] × dims[1]` block.
    pub fn slice(&self, k: usize) -> &[f64] {
        let len = self.dims[0] * self.dims[1];
        &self.data[k * len..(k + 1) * len]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Jacobians of the model nonlinearity stacked over sampling points.
///
/// Rows `0..n` are the state-equation polynomials, row `n` the output
/// polynomial (all zeros when the output equation is linear). Columns are
/// the variables `(x_1, …, x_n, u)` in the model's internal coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianTensor {
    pub values: Tensor3,
    pub points: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Polynomial part of the model as a map `R^(n+1) -> R^(n+1)`.
pub(crate) fn nonlinearity(model: &PnlssModel, point: &[f64]) -> Vec<f64> {
    let n = model.order();
    let zeta = model.state_basis.evaluate(point);
    let eta = model.output_basis.evaluate(point);
    let mut out = vec![0.0; n + 1];
    for (i, o) in out.iter_mut().take(n).enumerate() {
        *o = (0..zeta.len()).map(|k| model.e[(i, k)] * zeta[k]).sum();
    }
    out[n] = model.f.iter().zip(&eta).map(|(a, b)| a * b).sum();
    out
}

fn basis_jacobian(basis: &MonomialBasis, point: &[f64]) -> Vec<Vec<f64>> {
    basis
        .exponents()
        .iter()
        .map(|e| {
            (0..point.len())
                .map(|v| {
                    if e[v] == 0 {
                        return 0.0;
                    }
                    let mut prod = e[v] as f64 * point[v].powi(e[v] as i32 - 1);
                    for (w, &p) in e.iter().enumerate() {
                        if w != v {
                            prod *= point[w].powi(p as i32);
                        }
                    }
                    prod
                })
                .collect()
        })
        .collect()
}

/// Analytic Jacobian of [`nonlinearity`] at one point.
pub(crate) fn nonlinearity_jacobian(model: &PnlssModel, point: &[f64]) -> Vec<Vec<f64>> {
    let n = model.order();
    let dz = basis_jacobian(&model.state_basis, point);
    let de = basis_jacobian(&model.output_basis, point);
    let mut jac = vec![vec![0.0; n + 1]; n + 1];
    for i in 0..n {
        for (m, row) in dz.iter().enumerate() {
            let e = model.e[(i, m)];
            if e != 0.0 {
                for j in 0..=n {
                    jac[i][j] += e * row[j];
                }
            }
        }
    }
    for (m, row) in de.iter().enumerate() {
        for j in 0..=n {
            jac[n][j] += model.f[m] * row[j];
        }
    }
    jac
}

/// Evaluates the Jacobian tensor at `count` standard-normal points scaled
/// componentwise by `scales` (one per variable).
pub fn build_jacobian_tensor(model: &PnlssModel, count: usize, seed: u64, scales: &[f64]) -> Result<JacobianTensor> {
    let nv = model.order() + 1;
    if count == 0 {
        return Err(misconfig("at least one sampling point is required"));
    }
    if scales.len() != nv {
        return Err(Error::ShapeMismatch(format!(
            "{} scales for {} variables",
            scales.len(),
            nv
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points: Vec<Vec<f64>> = (0..count)
        .map(|_| {
            scales
                .iter()
                .map(|s| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * s
                })
                .collect()
        })
        .collect();
    let mut values = Tensor3::zeros([nv, nv, count]);
    for (k, p) in points.iter().enumerate() {
        let jac = nonlinearity_jacobian(model, p);
        for (i, row) in jac.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                values.set(i, j, k, *v);
            }
        }
    }
    let tensor = JacobianTensor { values, points, seed };
    let err = tensor.finite_difference_error(model, 8);
    if err > 1e-6 {
        return Err(misconfig(format!(
            "Jacobian tensor disagrees with finite differences (relative error {err:e})"
        )));
    }
    Ok(tensor)
}

impl JacobianTensor {
    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    /// Largest relative deviation from central differences over the first
    /// `max_points` sampling points.
    pub fn finite_difference_error(&self, model: &PnlssModel, max_points: usize) -> f64 {
        let nv = model.order() + 1;
        let mut worst = 0.0f64;
        for (k, p) in self.points.iter().enumerate().take(max_points) {
            let scale = self.values.slice(k).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale == 0.0 {
                continue;
            }
            for j in 0..nv {
                let h = 1e-5 * p[j].abs().max(1e-3);
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus[j] += h;
                minus[j] -= h;
                let fp = nonlinearity(model, &plus);
                let fm = nonlinearity(model, &minus);
                for i in 0..nv {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    worst = worst.max((fd - self.values.get(i, j, k)).abs() / scale);
                }
            }
        }
        worst
    }
}

/// Standard deviation of every state and of the input along a simulation,
/// in the model's internal coordinates.
pub fn trajectory_scales(model: &PnlssModel, u: &[f64]) -> Result<Vec<f64>> {
    let states = model.simulate_states(u)?;
    let nv = model.order() + 1;
    let len = states.len() as f64;
    Ok((0..nv)
        .map(|v| {
            let mean = states.iter().map(|s| s[v]).sum::<f64>() / len;
            let var = states.iter().map(|s| (s[v] - mean).powi(2)).sum::<f64>() / len;
            let sd = var.sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect())
}
