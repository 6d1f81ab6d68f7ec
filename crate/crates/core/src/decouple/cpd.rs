use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor::Tensor3;
use crate::error::{misconfig, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpdOptions {
    pub max_iter: usize,
    /// Converged once the relative cost change per sweep drops below this.
    pub tolerance: f64,
    /// A relative change below this while the fit is still above
    /// `target_fit` flags stagnation.
    pub stagnation: f64,
    /// Stop early once the relative fit error is below this.
    pub target_fit: f64,
    pub restarts: usize,
}

impl Default for CpdOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tolerance: 1e-10,
            stagnation: 1e-12,
            target_fit: 1e-12,
            restarts: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpdStop {
    TargetReached,
    Converged,
    Stagnated,
    MaxIterations,
}

/// `T[i,j,k] ≈ Σ_ℓ W[i,ℓ] V[j,ℓ] H[k,ℓ]`.
///
/// After normalisation every column of `V` has unit norm, every column of
/// `H` unit rms, the largest-magnitude entries of the `V` and `W` columns are
/// positive, and columns are ordered by descending `W` column norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpdFactors {
    #[serde(with = "crate::linear::rows_serde")]
    pub w: DMatrix<f64>,
    #[serde(with = "crate::linear::rows_serde")]
    pub v: DMatrix<f64>,
    #[serde(with = "crate::linear::rows_serde")]
    pub h: DMatrix<f64>,
    /// `‖T − [[W, V, H]]‖_F / ‖T‖_F` (absolute when `T` is zero).
    pub fit_error: f64,
    pub iterations: usize,
    pub stop: CpdStop,
    /// Squared residual norm after every ALS sweep of the selected restart.
    pub cost_history: Vec<f64>,
}

impl CpdFactors {
    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn stagnated(&self) -> bool {
        self.stop == CpdStop::Stagnated
    }

    pub fn reconstruct(&self) -> Tensor3 {
        let dims = [self.w.nrows(), self.v.nrows(), self.h.nrows()];
        let r = self.rank();
        Tensor3::from_fn(dims, |i, j, k| (0..r).map(|l| self.w[(i, l)] * self.v[(j, l)] * self.h[(k, l)]).sum())
    }
}

/// Mode products `M[a, ℓ] = Σ T[...] B[., ℓ] C[., ℓ]` for the three modes.
fn mttkrp(t: &Tensor3, mode: usize, w: &DMatrix<f64>, v: &DMatrix<f64>, h: &DMatrix<f64>) -> DMatrix<f64> {
    let [ni, nj, nk] = t.dims();
    let r = w.ncols();
    let rows = [ni, nj, nk][mode];
    let mut out = DMatrix::zeros(rows, r);
    for k in 0..nk {
        let slice = t.slice(k);
        for i in 0..ni {
            for j in 0..nj {
                let x = slice[i * nj + j];
                if x == 0.0 {
                    continue;
                }
                for l in 0..r {
                    match mode {
                        0 => out[(i, l)] += x * v[(j, l)] * h[(k, l)],
                        1 => out[(j, l)] += x * w[(i, l)] * h[(k, l)],
                        _ => out[(k, l)] += x * w[(i, l)] * v[(j, l)],
                    }
                }
            }
        }
    }
    out
}

fn residual_norm2(t: &Tensor3, w: &DMatrix<f64>, v: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    let [ni, nj, nk] = t.dims();
    let r = w.ncols();
    let mut acc = 0.0;
    for k in 0..nk {
        let slice = t.slice(k);
        for i in 0..ni {
            for j in 0..nj {
                let mut m = 0.0;
                for l in 0..r {
                    m += w[(i, l)] * v[(j, l)] * h[(k, l)];
                }
                let e = slice[i * nj + j] - m;
                acc += e * e;
            }
        }
    }
    acc
}

/// Least-squares update `X = M G⁺` with `G` the Hadamard product of Grams.
fn solve_update(m: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let g = (a.tr_mul(a)).component_mul(&b.tr_mul(b));
    let pinv = g.clone().pseudo_inverse(1e-14 * g.norm().max(f64::MIN_POSITIVE)).unwrap_or_else(|_| DMatrix::zeros(g.nrows(), g.ncols()));
    m * pinv
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

struct Run {
    w: DMatrix<f64>,
    v: DMatrix<f64>,
    h: DMatrix<f64>,
    history: Vec<f64>,
    stop: CpdStop,
}

fn als(t: &Tensor3, r: usize, opts: &CpdOptions, rng: &mut ChaCha8Rng) -> Run {
    let [ni, nj, nk] = t.dims();
    let norm2 = t.norm().powi(2);
    let mut w = random_matrix(ni, r, rng);
    let mut v = random_matrix(nj, r, rng);
    let mut h = random_matrix(nk, r, rng);
    let target = opts.target_fit * opts.target_fit * norm2;
    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut stop = CpdStop::MaxIterations;
    for _ in 0..opts.max_iter {
        w = solve_update(&mttkrp(t, 0, &w, &v, &h), &v, &h);
        v = solve_update(&mttkrp(t, 1, &w, &v, &h), &w, &h);
        h = solve_update(&mttkrp(t, 2, &w, &v, &h), &w, &v);
        let cost = residual_norm2(t, &w, &v, &h);
        history.push(cost);
        if cost <= target {
            stop = CpdStop::TargetReached;
            break;
        }
        let change = (prev - cost).abs() / prev.max(f64::MIN_POSITIVE);
        if change < opts.stagnation {
            stop = CpdStop::Stagnated;
            break;
        }
        if change < opts.tolerance {
            stop = CpdStop::Converged;
            break;
        }
        prev = cost;
    }
    Run { w, v, h, history, stop }
}

fn normalize(w: &mut DMatrix<f64>, v: &mut DMatrix<f64>, h: &mut DMatrix<f64>) {
    let r = w.ncols();
    let nk = h.nrows() as f64;
    for l in 0..r {
        let nv = v.column(l).norm();
        let nh = h.column(l).norm() / nk.sqrt();
        if nv > 0.0 && nh > 0.0 {
            v.column_mut(l).scale_mut(1.0 / nv);
            h.column_mut(l).scale_mut(1.0 / nh);
            w.column_mut(l).scale_mut(nv * nh);
        }
        let flip = |m: &DMatrix<f64>| {
            let col = m.column(l);
            let idx = col.iamax();
            col[idx] < 0.0
        };
        if flip(v) {
            v.column_mut(l).neg_mut();
            h.column_mut(l).neg_mut();
        }
        if flip(w) {
            w.column_mut(l).neg_mut();
            h.column_mut(l).neg_mut();
        }
    }
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| w.column(b).norm().total_cmp(&w.column(a).norm()));
    let permute = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), r, |i, l| m[(i, order[l])]);
    *w = permute(w);
    *v = permute(v);
    *h = permute(h);
}

/// Rank-`r` CPD by alternating least squares; best of `opts.restarts`
/// random initialisations.
pub fn cpd(t: &Tensor3, r: usize, opts: &CpdOptions, seed: u64) -> Result<CpdFactors> {
    let [ni, nj, nk] = t.dims();
    if r == 0 || r > ni * nj {
        return Err(misconfig(format!("CPD rank must be in 1..={}", ni * nj)));
    }
    if nk == 0 {
        return Err(misconfig("tensor has no slices"));
    }
    let norm = t.norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    for _ in 0..opts.restarts.max(1) {
        let run = als(t, r, opts, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => run.history.last() < b.history.last(),
        };
        if better {
            best = Some(run);
        }
        if best.as_ref().is_some_and(|b| b.stop == CpdStop::TargetReached) {
            break;
        }
    }
    let Run { mut w, mut v, mut h, history, stop } = best.expect("at least one restart");
    normalize(&mut w, &mut v, &mut h);
    let res = residual_norm2(t, &w, &v, &h).sqrt();
    let fit_error = if norm > 0.0 { res / norm } else { res };
    Ok(CpdFactors {
        w,
        v,
        h,
        fit_error,
        iterations: history.len(),
        stop,
        cost_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEstimate {
    pub rank: usize,
    /// `(r, fit_error)` for every rank tried.
    pub curve: Vec<(usize, f64)>,
    pub converged: bool,
}

/// Smallest rank whose CPD fit error is below `tol`.
pub fn estimate_rank(t: &Tensor3, r_max: usize, tol: f64, opts: &CpdOptions, seed: u64) -> Result<RankEstimate> {
    if r_max == 0 {
        return Err(misconfig("r_max must be at least 1"));
    }
    let mut curve = Vec::new();
    for r in 1..=r_max {
        let f = cpd(t, r, opts, seed.wrapping_add(r as u64))?;
        curve.push((r, f.fit_error));
        if f.fit_error < tol {
            return Ok(RankEstimate {
                rank: r,
                curve,
                converged: true,
            });
        }
    }
    Ok(RankEstimate {
        rank: r_max,
        curve,
        converged: false,
    })
}

/// Generic uniqueness condition `n²(n²−1) ≥ 2r(r−1)`, evaluated with the
/// literal `n` given.
pub fn check_uniqueness(n: usize, r: usize) -> bool {
    let n2 = (n * n) as u128;
    let r = r as u128;
    n2 * n2.saturating_sub(1) >= 2 * r * r.saturating_sub(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(dims: [usize; 3], r: usize, seed: u64) -> (Tensor3, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_matrix(dims[0], r, &mut rng);
        let v = random_matrix(dims[1], r, &mut rng);
        let h = random_matrix(dims[2], r, &mut rng);
        let t = Tensor3::from_fn(dims, |i, j, k| (0..r).map(|l| w[(i, l)] * v[(j, l)] * h[(k, l)]).sum());
        (t, w, v, h)
    }

    #[test]
    fn exact_recovery_of_low_rank_tensors() {
        for r in 1..=3 {
            let (t, _, v, _) = synthetic([4, 4, 200], r, 7 + r as u64);
            let f = cpd(&t, r, &CpdOptions::default(), 1).unwrap();
            assert!(f.fit_error < 1e-8, "r={r}: {}", f.fit_error);
            // Every true V column is parallel to one recovered column.
            for l in 0..r {
                let tv = v.column(l).normalize();
                let best = (0..r).map(|m| tv.dot(&f.v.column(m)).abs()).fold(0.0, f64::max);
                assert!((best - 1.0).abs() < 1e-8, "r={r}: {best}");
            }
        }
    }

    #[test]
    fn full_rank_budget_fits_anything() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor3::from_fn([3, 3, 40], |_, _, _| StandardNormal.sample(&mut rng));
        let f = cpd(&t, 9, &CpdOptions::default(), 5).unwrap();
        assert!(f.fit_error < 1e-6, "{}", f.fit_error);
    }

    #[test]
    fn cost_never_increases() {
        let (t, _, _, _) = synthetic([4, 4, 100], 4, 11);
        let f = cpd(&t, 3, &CpdOptions::default(), 2).unwrap();
        for w in f.cost_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} > {}", w[1], w[0]);
        }
    }

    #[test]
    fn normalisation_and_ordering() {
        let (t, _, _, _) = synthetic([4, 4, 100], 3, 13);
        let f = cpd(&t, 3, &CpdOptions::default(), 4).unwrap();
        for l in 0..3 {
            assert!((f.v.column(l).norm() - 1.0).abs() < 1e-12);
            assert!((f.h.column(l).norm() / 10.0 - 1.0).abs() < 1e-12);
        }
        for l in 1..3 {
            assert!(f.w.column(l - 1).norm() >= f.w.column(l).norm());
        }
    }

    #[test]
    fn rank_of_synthetic_and_zero_tensors() {
        let (t, _, _, _) = synthetic([4, 4, 150], 3, 17);
        let est = estimate_rank(&t, 6, 1e-3, &CpdOptions::default(), 0).unwrap();
        assert_eq!(est.rank, 3);
        assert!(est.converged);
        let zero = Tensor3::zeros([4, 4, 10]);
        let est = estimate_rank(&zero, 6, 1e-3, &CpdOptions::default(), 0).unwrap();
        assert_eq!(est.rank, 1);
        assert_eq!(est.curve[0].1, 0.0);
    }

    #[test]
    fn uniqueness_inequality() {
        assert!(check_uniqueness(3, 6));
        assert!(!check_uniqueness(3, 7));
        assert!(check_uniqueness(1, 1));
    }

    #[test]
    fn invalid_rank_rejected() {
        let t = Tensor3::zeros([2, 2, 3]);
        assert!(cpd(&t, 0, &CpdOptions::default(), 0).is_err());
        assert!(cpd(&t, 5, &CpdOptions::default(), 0).is_err());
    }
}
