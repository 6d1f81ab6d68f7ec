//! Levenberg-Marquardt for output-error problems.
//!
//! Jacobian columns are normalised to unit length before each step, which
//! makes the damping scale-invariant across parameters of very different
//! magnitudes (polynomial coefficients, state matrices). Steps are computed
//! from an eigendecomposition of the normalised Gram matrix so that several
//! damping values can be tried for the price of one factorisation.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A nonlinear least-squares problem in a flat parameter vector.
pub trait LeastSquares {
    fn parameter_count(&self) -> usize;

    /// Residual vector, or `None` when the model diverges at `theta`.
    fn residuals(&self, theta: &[f64]) -> Option<Vec<f64>>;

    /// Residuals together with their Jacobian (rows: residuals).
    fn jacobian(&self, theta: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)>;

    /// Score used to select among accepted iterates; lower is better.
    fn validation_score(&self, _theta: &[f64]) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmOptions {
    pub max_iter: usize,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub lambda_max: f64,
    /// Stop once an accepted step improves the cost by less than this fraction.
    pub min_relative_improvement: f64,
    /// Eigenvalues below this fraction of the largest are treated as zero.
    pub rcond: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            lambda_init: 1e-3,
            lambda_factor: 10.0,
            lambda_max: 1e10,
            min_relative_improvement: 0.0,
            rcond: 1e-14,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    /// Every trial step was rejected up to the damping cap.
    LambdaCap,
    SmallImprovement,
    ZeroCost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmIteration {
    pub iteration: usize,
    /// Mean-square residual.
    pub cost: f64,
    pub lambda: f64,
    pub validation: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    /// Parameters of the selected iterate.
    pub theta: Vec<f64>,
    /// Parameters after the last accepted step.
    pub last_theta: Vec<f64>,
    pub log: Vec<LmIteration>,
    /// Index into `log` of the selected iterate.
    pub selected: usize,
    pub stop: StopReason,
}

pub fn mean_square(e: &[f64]) -> f64 {
    if e.is_empty() {
        return 0.0;
    }
    e.iter().map(|v| v * v).sum::<f64>() / e.len() as f64
}

struct NormalisedSystem {
    eigvals: DVector<f64>,
    eigvecs: DMatrix<f64>,
    /// Gradient projected on the eigenvectors.
    projected: DVector<f64>,
    col_scale: Vec<f64>,
    cutoff: f64,
}

impl NormalisedSystem {
    fn new(jac: &DMatrix<f64>, e: &[f64], rcond: f64) -> Self {
        let p = jac.ncols();
        let col_scale: Vec<f64> = (0..p)
            .map(|j| {
                let n = jac.column(j).norm();
                if n > 0.0 && n.is_finite() {
                    n
                } else {
                    1.0
                }
            })
            .collect();
        let mut js = jac.clone();
        for (j, s) in col_scale.iter().enumerate() {
            js.column_mut(j).scale_mut(1.0 / s);
        }
        let gram = js.tr_mul(&js);
        let grad = js.tr_mul(&DVector::from_column_slice(e));
        let eig = SymmetricEigen::new(gram);
        let projected = eig.eigenvectors.tr_mul(&grad);
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
        Self {
            eigvals: eig.eigenvalues,
            eigvecs: eig.eigenvectors,
            projected,
            col_scale,
            cutoff: max * rcond,
        }
    }

    fn step(&self, lambda: f64) -> Vec<f64> {
        let coeffs = DVector::from_fn(self.eigvals.len(), |i, _| {
            let l = self.eigvals[i];
            if l > self.cutoff {
                -self.projected[i] / (l + lambda)
            } else {
                0.0
            }
        });
        let ds = &self.eigvecs * coeffs;
        ds.iter()
            .zip(&self.col_scale)
            .map(|(d, s)| d / s)
            .collect()
    }
}

/// Runs LM from `theta0`. Fails only if the initial point already diverges.
pub fn levenberg_marquardt<P: LeastSquares + ?Sized>(
    problem: &P,
    theta0: &[f64],
    opts: &LmOptions,
) -> Result<LmOutcome> {
    let (mut e, mut jac) = problem
        .jacobian(theta0)
        .ok_or(Error::Divergence { index: 0 })?;
    let mut theta = theta0.to_vec();
    let mut cost = mean_square(&e);
    let mut lambda = opts.lambda_init;

    let score = |cost: f64, val: Option<f64>| val.unwrap_or(cost);
    let val = problem.validation_score(&theta);
    let mut log = vec![LmIteration {
        iteration: 0,
        cost,
        lambda,
        validation: val,
    }];
    let mut best_theta = theta.clone();
    let mut best_score = score(cost, val);
    let mut selected = 0;
    let mut stop = StopReason::MaxIterations;

    'outer: for it in 1..=opts.max_iter {
        if cost == 0.0 {
            stop = StopReason::ZeroCost;
            break;
        }
        let system = NormalisedSystem::new(&jac, &e, opts.rcond);
        let (trial, trial_cost) = loop {
            let step = system.step(lambda);
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, s)| t + s).collect();
            let trial_cost = problem
                .residuals(&trial)
                .map(|r| mean_square(&r))
                .filter(|c| c.is_finite())
                .unwrap_or(f64::INFINITY);
            if trial_cost < cost {
                break (trial, trial_cost);
            }
            lambda *= opts.lambda_factor;
            if lambda > opts.lambda_max {
                stop = StopReason::LambdaCap;
                break 'outer;
            }
        };
        let Some((e_new, jac_new)) = problem.jacobian(&trial) else {
            // Residuals were finite a moment ago; treat as a rejected step.
            lambda *= opts.lambda_factor;
            continue;
        };
        let improvement = (cost - trial_cost) / cost;
        theta = trial;
        e = e_new;
        jac = jac_new;
        cost = mean_square(&e);
        lambda = (lambda / opts.lambda_factor).max(1e-20);

        let val = problem.validation_score(&theta);
        log.push(LmIteration {
            iteration: it,
            cost,
            lambda,
            validation: val,
        });
        let s = score(cost, val);
        if s < best_score {
            best_score = s;
            best_theta = theta.clone();
            selected = log.len() - 1;
        }
        if improvement < opts.min_relative_improvement {
            stop = StopReason::SmallImprovement;
            break;
        }
    }

    Ok(LmOutcome {
        theta: best_theta,
        last_theta: theta,
        log,
        selected,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y = a exp(-b t) + c
    struct ExpFit {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquares for ExpFit {
        fn parameter_count(&self) -> usize {
            3
        }

        fn residuals(&self, th: &[f64]) -> Option<Vec<f64>> {
            Some(
                self.t
                    .iter()
                    .zip(&self.y)
                    .map(|(t, y)| th[0] * (-th[1] * t).exp() + th[2] - y)
                    .collect(),
            )
        }

        fn jacobian(&self, th: &[f64]) -> Option<(Vec<f64>, DMatrix<f64>)> {
            let r = self.residuals(th)?;
            let j = DMatrix::from_fn(self.t.len(), 3, |i, k| {
                let t = self.t[i];
                match k {
                    0 => (-th[1] * t).exp(),
                    1 => -th[0] * t * (-th[1] * t).exp(),
                    _ => 1.0,
                }
            });
            Some((r, j))
        }
    }

    fn problem() -> ExpFit {
        let t: Vec<f64> = (0..50).map(|i| i as f64 * 0.1).collect();
        let y = t.iter().map(|t| 2.5 * (-1.3 * t).exp() + 0.4).collect();
        ExpFit { t, y }
    }

    #[test]
    fn recovers_exponential() {
        let p = problem();
        let out = levenberg_marquardt(&p, &[1.0, 0.5, 0.0], &LmOptions::default()).unwrap();
        assert!((out.theta[0] - 2.5).abs() < 1e-8);
        assert!((out.theta[1] - 1.3).abs() < 1e-8);
        assert!((out.theta[2] - 0.4).abs() < 1e-8);
    }

    #[test]
    fn accepted_costs_never_increase() {
        let p = problem();
        let out = levenberg_marquardt(&p, &[0.1, 3.0, 1.0], &LmOptions::default()).unwrap();
        for w in out.log.windows(2) {
            assert!(w[1].cost <= w[0].cost);
        }
    }

    #[test]
    fn fixed_point_is_left_alone() {
        let p = problem();
        let out = levenberg_marquardt(&p, &[2.5, 1.3, 0.4], &LmOptions::default()).unwrap();
        assert_eq!(out.theta, vec![2.5, 1.3, 0.4]);
    }
}
