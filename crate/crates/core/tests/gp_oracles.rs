mod common;

use common::{jacobi_eigenvalues, rbf, sigma_max, uniform_points};
use sngp::gp::{GpConfig, RffGpLayer};
use sngp::linalg::{self, Matrix, RngState};
use sngp::metrics::spearman;

fn shallow_layer(num_features: usize, length_scale: f64, seed: u64) -> RffGpLayer {
    let cfg = GpConfig {
        num_features,
        length_scale,
        layer_norm: false,
        ..GpConfig::default()
    };
    RffGpLayer::new(2, 2, cfg, &mut RngState::new(seed)).unwrap()
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        p.row_mut(r).copy_from_slice(&linalg::softmax(logits.row(r)));
    }
    p
}

#[test]
fn jacobi_oracle_sanity() {
    let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
    let mut e = jacobi_eigenvalues(&a);
    e.sort_by(f64::total_cmp);
    assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    assert!((sigma_max(&Matrix::from_diag(&[0.5, -4.0, 2.0])) - 4.0).abs() < 1e-12);
}

#[test]
fn features_approximate_rbf_kernel() {
    let layer = shallow_layer(4096, 1.0, 1);
    let mut rng = RngState::new(2);
    let xs = uniform_points(100, -2.0, 2.0, &mut rng);
    let ys = uniform_points(100, -2.0, 2.0, &mut rng);
    let close = (0..100)
        .filter(|&i| {
            let a = layer.rff_features(xs.row(i)).unwrap();
            let b = layer.rff_features(ys.row(i)).unwrap();
            (linalg::dot(&a, &b) - rbf(xs.row(i), ys.row(i), 1.0)).abs() <= 0.05
        })
        .count();
    assert!(close >= 95, "{close}/100 pairs within tolerance");
}

#[test]
fn length_scale_stretches_kernel() {
    let layer = shallow_layer(4096, 2.0, 3);
    let a = layer.rff_features(&[0.0, 0.0]).unwrap();
    let b = layer.rff_features(&[2.0, 0.0]).unwrap();
    assert!((linalg::dot(&a, &b) - (-0.5f64).exp()).abs() < 0.05);
}

#[test]
fn repeated_minibatch_updates_converge_to_exact() {
    let mut layer = shallow_layer(32, 1.0, 4);
    let mut rng = RngState::new(5);
    layer.beta = rng.normal_matrix(2, 32, 1.0);
    let x = rng.normal_matrix(200, 2, 1.0);
    let phi = layer.features_batch(&x).unwrap().0;
    let probs = softmax_rows(&layer.logits_batch(&phi).unwrap());

    let mut exact = layer.clone();
    exact.update_precision_exact(&phi, &probs).unwrap();
    layer.reset_precision();
    for _ in 0..20_000 {
        layer.update_precision_minibatch(&phi, &probs).unwrap();
    }
    for k in 0..2 {
        let mut diff = layer.class_precision(k).clone();
        diff.add_scaled(-1.0, exact.class_precision(k)).unwrap();
        let rel = diff.frobenius_norm() / exact.class_precision(k).frobenius_norm();
        assert!(rel <= 1e-6, "class {k}: relative error {rel}");
    }
}

#[test]
fn far_point_reverts_to_prior_variance() {
    let mut layer = shallow_layer(2048, 1.0, 6);
    let x = RngState::new(7).normal_matrix(200, 2, 1.0);
    let phi = layer.features_batch(&x).unwrap().0;
    let probs = softmax_rows(&layer.logits_batch(&phi).unwrap());
    layer.update_precision_exact(&phi, &probs).unwrap();
    let far = [100.0 / 2f64.sqrt(), 100.0 / 2f64.sqrt()];
    let f = layer.rff_features(&far).unwrap();
    let prior = linalg::dot(&f, &f) / layer.config.ridge;
    let v = layer.predictive_variance(&f, 0).unwrap();
    assert!((v - prior).abs() <= 0.1 * prior, "variance {v} vs prior {prior}");
    let near = layer.rff_features(&[0.0, 0.0]).unwrap();
    assert!(layer.predictive_variance(&near, 0).unwrap() < 0.01 * prior);
}

#[test]
fn variance_grows_along_rays_from_data() {
    let mut layer = shallow_layer(2048, 1.0, 8);
    let mut rng = RngState::new(9);
    let x = uniform_points(300, -1.0, 1.0, &mut rng);
    let phi = layer.features_batch(&x).unwrap().0;
    let probs = softmax_rows(&layer.logits_batch(&phi).unwrap());
    layer.update_precision_exact(&phi, &probs).unwrap();
    let post = layer.posterior().unwrap();
    for ray in 0..8 {
        let angle = ray as f64 * std::f64::consts::PI / 4.0 + 0.1;
        let dir = [angle.cos(), angle.sin()];
        // the square [−1, 1]² lies within radius √2; start on that circle
        let radii: Vec<f64> = (0..20).map(|i| 2f64.sqrt() + 0.1 * i as f64).collect();
        let var: Vec<f64> = radii
            .iter()
            .map(|r| {
                let f = layer.rff_features(&[r * dir[0], r * dir[1]]).unwrap();
                post.variances(&f).unwrap()[0]
            })
            .collect();
        let rho = spearman(&var, &radii).unwrap();
        assert!(rho >= 0.99, "ray {ray}: spearman {rho}");
    }
}
