use nalgebra::{DMatrix, DVector};
use pnlss::boucwen::{continuous_linearization, integrate, BoucWenParams, InputInterpolation, SimConfig};

const FS: f64 = 750.0;

/// Smooth two-tone input, 0.4 s long.
fn smooth_input(amplitude: f64) -> Vec<f64> {
    (0..300)
        .map(|k| {
            let t = k as f64 / FS;
            amplitude * (0.7 * (2.0 * std::f64::consts::PI * 21.0 * t).sin() + 0.5 * (2.0 * std::f64::consts::PI * 47.0 * t).cos())
        })
        .collect()
}

fn run(params: &BoucWenParams, u: &[f64], oversample: usize) -> Vec<f64> {
    let cfg = SimConfig {
        oversample_factor: oversample,
        interpolation: InputInterpolation::Linear,
        ..SimConfig::default()
    };
    integrate(params, u, FS, &cfg).unwrap().displacement
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (s / a.len() as f64).sqrt()
}

/// Exact response of the linear dynamics to the piecewise-linear input
/// through the sampled values: first-order-hold discretisation of
/// `ẋ = A x + b u` with the input slope carried as an extra state.
fn first_order_hold_response(a: &DMatrix<f64>, b: &DVector<f64>, u: &[f64]) -> Vec<f64> {
    let h = 1.0 / FS;
    let mut aug = DMatrix::zeros(5, 5);
    aug.view_mut((0, 0), (3, 3)).copy_from(&(a * h));
    aug.view_mut((0, 3), (3, 1)).copy_from(&(b * h));
    aug[(3, 4)] = 1.0;
    let e = aug.exp();
    let phi = e.view((0, 0), (3, 3)).into_owned();
    let g_level = e.view((0, 3), (3, 1)).into_owned();
    let g_slope = e.view((0, 4), (3, 1)).into_owned();
    let mut x = DVector::zeros(3);
    let mut y = Vec::with_capacity(u.len());
    for k in 0..u.len() {
        y.push(x[0]);
        let next = if k + 1 < u.len() { u[k + 1] } else { u[k] };
        x = &phi * &x + &g_level * u[k] + &g_slope * (next - u[k]);
    }
    y
}

#[test]
fn halving_the_step_quarters_the_error() {
    let params = BoucWenParams::default();
    let u = smooth_input(50.0);
    let y5 = run(&params, &u, 5);
    let y10 = run(&params, &u, 10);
    let y20 = run(&params, &u, 20);
    let ratio = rms_diff(&y5, &y10) / rms_diff(&y10, &y20);
    assert!((3.5..=4.5).contains(&ratio), "step-halving ratio {ratio}");
}

#[test]
fn linear_limit_matches_exact_solution_at_second_order() {
    let params = BoucWenParams {
        beta: 0.0,
        ..BoucWenParams::default()
    };
    let u = smooth_input(50.0);
    let (a, b) = continuous_linearization(&params);
    let exact = first_order_hold_response(&a, &b, &u);
    let peak = exact.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let e10 = rms_diff(&run(&params, &u, 10), &exact);
    let e20 = rms_diff(&run(&params, &u, 20), &exact);
    assert!(e20 < 1e-2 * peak, "error {e20} against peak {peak}");
    let ratio = e10 / e20;
    assert!((3.5..=4.5).contains(&ratio), "error ratio {ratio}");
}

#[test]
fn hysteretic_force_is_bounded_under_large_input() {
    let params = BoucWenParams::default();
    let u = smooth_input(150.0);
    let cfg = SimConfig::default();
    let traj = integrate(&params, &u, FS, &cfg).unwrap();
    let umax = u.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let zmax = traj.hysteretic_force.iter().map(|v| v.abs()).fold(0.0, f64::max);
    assert!(zmax.is_finite() && zmax < 10.0 * umax);
}
