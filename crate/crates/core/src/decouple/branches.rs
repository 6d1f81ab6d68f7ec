use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cpd::CpdFactors;
use super::tensor::JacobianTensor;
use crate::error::{misconfig, Error, Result};

/// Vandermonde matrices above this condition number are solved with ridge
/// regularisation instead.
pub const CONDITION_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFit {
    pub degree: usize,
    /// Row `ℓ`: coefficients of `s̃^2 ..= s̃^d` for branch `ℓ`.
    #[serde(with = "crate::linear::rows_serde")]
    pub coefficients: DMatrix<f64>,
    /// Branches fitted with the ridge fallback.
    pub ill_conditioned: Vec<usize>,
    /// Relative residual of each derivative fit.
    pub residuals: Vec<f64>,
}

/// Least-squares fit of `h ≈ Σ_{p=1}^{d-1} c_p s^p`, returning `c_1..c_{d-1}`
/// and whether the ridge fallback was used.
pub fn fit_derivative(s: &[f64], h: &[f64], degree: usize) -> Result<(Vec<f64>, bool)> {
    if degree < 2 {
        return Err(misconfig("branch degree must be at least 2"));
    }
    if s.len() != h.len() {
        return Err(Error::ShapeMismatch(format!("{} abscissae, {} values", s.len(), h.len())));
    }
    let p = degree - 1;
    let x = DMatrix::from_fn(s.len(), p, |k, j| s[k].powi(j as i32 + 1));
    let rhs = DVector::from_column_slice(h);
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smax > 0.0 && smin > 0.0 && smax / smin <= CONDITION_LIMIT && s.len() >= p {
        let c = svd
            .solve(&rhs, 0.0)
            .map_err(|e| misconfig(format!("branch fit failed: {e}")))?;
        return Ok((c.iter().copied().collect(), false));
    }
    let gram = x.tr_mul(&x);
    let mu = 1e-10 * gram.trace() / p as f64;
    let reg = gram + DMatrix::identity(p, p) * mu.max(f64::MIN_POSITIVE);
    let c = reg
        .cholesky()
        .map(|ch| ch.solve(&x.tr_mul(&rhs)))
        .ok_or_else(|| misconfig("regularised branch fit failed"))?;
    Ok((c.iter().copied().collect(), true))
}

/// Integrates derivative coefficients `c_1..c_{d-1}` into `g_2..g_d`.
pub fn integrate(derivative: &[f64]) -> Vec<f64> {
    derivative
        .iter()
        .enumerate()
        .map(|(i, c)| c / (i + 2) as f64)
        .collect()
}

/// Fits every branch's derivative against its column of `H` on the
/// projected sampling points, then integrates with zero constants.
pub fn fit_branches(factors: &CpdFactors, tensor: &JacobianTensor, degree: usize) -> Result<BranchFit> {
    let r = factors.rank();
    if factors.h.nrows() != tensor.point_count() || factors.v.nrows() != tensor.values.dims()[1] {
        return Err(Error::ShapeMismatch("factors do not belong to this tensor".into()));
    }
    if degree < 2 {
        return Err(misconfig("branch degree must be at least 2"));
    }
    let mut coefficients = DMatrix::zeros(r, degree - 1);
    let mut ill_conditioned = Vec::new();
    let mut residuals = Vec::with_capacity(r);
    for l in 0..r {
        let vl = factors.v.column(l);
        let s: Vec<f64> = tensor
            .points
            .iter()
            .map(|p| p.iter().zip(vl.iter()).map(|(a, b)| a * b).sum())
            .collect();
        let h: Vec<f64> = factors.h.column(l).iter().copied().collect();
        let (deriv, ridge) = fit_derivative(&s, &h, degree)?;
        if ridge {
            log::warn!("branch {l}: Vandermonde condition above {CONDITION_LIMIT:e}, ridge fallback used");
            ill_conditioned.push(l);
        }
        let fitted: Vec<f64> = s
            .iter()
            .map(|sv| deriv.iter().enumerate().map(|(i, c)| c * sv.powi(i as i32 + 1)).sum())
            .collect();
        let num: f64 = fitted.iter().zip(&h).map(|(a, b)| (a - b).powi(2)).sum();
        let den: f64 = h.iter().map(|v| v * v).sum();
        residuals.push(if den > 0.0 { (num / den).sqrt() } else { num.sqrt() });
        for (j, c) in integrate(&deriv).into_iter().enumerate() {
            coefficients[(l, j)] = c;
        }
    }
    Ok(BranchFit {
        degree,
        coefficients,
        ill_conditioned,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|k| -1.5 + 3.0 * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn cubic_from_quadratic_derivative() {
        let s = grid(50);
        let h: Vec<f64> = s.iter().map(|v| 3.0 * v * v).collect();
        let (d, ridge) = fit_derivative(&s, &h, 3).unwrap();
        assert!(!ridge);
        let g = integrate(&d);
        assert!(g[0].abs() < 1e-12);
        assert!((g[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_branch_under_small_noise() {
        let s = grid(200);
        let h: Vec<f64> = s
            .iter()
            .enumerate()
            .map(|(k, v)| 2.0 * v + 1e-9 * ((k as f64 * 12.9898).sin()))
            .collect();
        let (d, _) = fit_derivative(&s, &h, 2).unwrap();
        let g = integrate(&d);
        assert!((g[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn random_polynomials_recovered() {
        for degree in 2..=8 {
            let s = grid(degree + 3);
            let truth: Vec<f64> = (1..degree).map(|p| ((p * 7919) % 13) as f64 / 6.0 - 1.0).collect();
            let h: Vec<f64> = s
                .iter()
                .map(|v| truth.iter().enumerate().map(|(i, c)| c * v.powi(i as i32 + 1)).sum())
                .collect();
            let (d, _) = fit_derivative(&s, &h, degree).unwrap();
            for (a, b) in d.iter().zip(&truth) {
                assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "d={degree}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn degenerate_abscissae_use_ridge() {
        let s = vec![0.0; 20];
        let h = vec![0.0; 20];
        let (_, ridge) = fit_derivative(&s, &h, 4).unwrap();
        assert!(ridge);
    }

    #[test]
    fn degree_one_rejected() {
        assert!(fit_derivative(&[1.0], &[1.0], 1).is_err());
    }
}
