mod common;

use nalgebra::DMatrix;
use pnlss::sim::SensitivityModel;

/// Central finite differences of `simulate_scaled`, rows from `skip` on.
fn finite_difference<M: SensitivityModel>(model: &M, u: &[f64], skip: usize) -> DMatrix<f64> {
    let theta = model.parameter_vector();
    let rows = u.len() - skip;
    let mut jac = DMatrix::zeros(rows, theta.len());
    for j in 0..theta.len() {
        let step = 1e-6 * theta[j].abs().max(1.0);
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[j] += step;
        minus[j] -= step;
        let yp = model.simulate_scaled(&plus, u).unwrap();
        let ym = model.simulate_scaled(&minus, u).unwrap();
        for k in 0..rows {
            jac[(k, j)] = (yp[skip + k] - ym[skip + k]) / (2.0 * step);
        }
    }
    jac
}

fn check<M: SensitivityModel>(model: &M, u: &[f64], skip: usize) {
    let theta = model.parameter_vector();
    let (y, analytic) = model.simulate_with_sensitivity(&theta, u, skip).unwrap();
    let direct = model.simulate_scaled(&theta, u).unwrap();
    assert_eq!(y.len(), u.len() - skip);
    for (a, b) in y.iter().zip(&direct[skip..]) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    let numeric = finite_difference(model, u, skip);
    let err = common::worst_column_error(&analytic, &numeric);
    assert!(err < 1e-5, "worst column relative error {err}");
}

#[test]
fn pnlss_jacobian_matches_finite_differences() {
    let model = common::random_pnlss(&[2], 0.05, 3);
    let u = common::multisine(256, 1, 0.5, 5).samples[..200].to_vec();
    check(&model, &u, 0);
    check(&model, &u, 50);
}

#[test]
fn pnlss_jacobian_with_cubic_terms() {
    let model = common::random_pnlss(&[2, 3], 0.05, 4);
    let u = common::multisine(256, 1, 0.5, 6).samples[..200].to_vec();
    check(&model, &u, 0);
}

#[test]
fn decoupled_jacobian_matches_finite_differences() {
    let model = common::random_decoupled(2, 4, 7);
    let u = common::multisine(256, 1, 0.5, 8).samples[..200].to_vec();
    check(&model, &u, 0);
    check(&model, &u, 20);
}
