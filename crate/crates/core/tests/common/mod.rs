//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use sngp::linalg::{Matrix, RngState};
use sngp::model::SngpModel;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
#[allow(clippy::needless_range_loop)]
pub fn jacobi_eigenvalues(a: &Matrix) -> Vec<f64> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[i][i]).collect()
}

/// Largest singular value via the eigenvalues of `WᵀW`.
pub fn sigma_max(w: &Matrix) -> f64 {
    let wtw = w.transpose_matmul(w).unwrap();
    jacobi_eigenvalues(&wtw)
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(0.0)
        .sqrt()
}

pub fn rbf(x: &[f64], y: &[f64], length_scale: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * length_scale * length_scale)).exp()
}

/// Largest central finite-difference relative error over every parameter
/// (trainable or frozen) of `model`'s loss on `(x, labels)`.
pub fn max_gradient_error(
    model: &SngpModel,
    x: &Matrix,
    labels: &[usize],
    l2_beta: f64,
    step: f64,
) -> (f64, usize) {
    let mut rng = RngState::new(0);
    let (_, grads) = model
        .loss_and_grads(x, labels, l2_beta, x.rows(), false, &mut rng)
        .unwrap();
    let analytic: Vec<Vec<f64>> = grads.slices(true).iter().map(|s| s.to_vec()).collect();
    let loss_at = |m: &SngpModel| {
        m.loss_and_grads(x, labels, l2_beta, x.rows(), false, &mut RngState::new(0))
            .unwrap()
            .0
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (s, slice) in analytic.iter().enumerate() {
        for (j, &a) in slice.iter().enumerate() {
            let mut plus = model.clone();
            plus.all_param_slices_mut()[s][j] += step;
            let mut minus = model.clone();
            minus.all_param_slices_mut()[s][j] -= step;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
            let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

/// Points sampled uniformly from `[lo, hi]²`.
pub fn uniform_points(n: usize, lo: f64, hi: f64, rng: &mut RngState) -> Matrix {
    let data = rng.sample_uniform(2 * n, lo, hi).unwrap();
    Matrix::from_vec(n, 2, data).unwrap()
}
