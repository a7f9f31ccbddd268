//! Oracle suites behind `sngp verify`.
//!
//! Each suite is a list of named properties checked against independent
//! computations (enumeration, exact expectations, the closed-form RBF
//! kernel, a one-pass Laplace precision).

use std::time::Instant;

use sngp::baselines::{build_and_train, ModelVariant};
use sngp::data::gen_two_moons;
use sngp::experiment::moons_model_config;
use sngp::gp::{GpConfig, RffGpLayer};
use sngp::linalg::{self, Matrix, RngState};
use sngp::metrics::{ece, spearman, PredictionSet, DEFAULT_ECE_BINS};
use sngp::nn::{lipschitz_probe, NetworkConfig, ResFfnNetwork};
use sngp::theory::{
    l1_ece_bound_check, max_entropy_oracle, minimax_oracle, pointwise_score, bregman_score,
    ScoringRule,
};
use sngp::train::{PrecisionMode, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Theory,
    Lipschitz,
    Kernel,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

type Checks = Result<Vec<Check>, CliError>;

pub fn run(suite: Suite) -> Checks {
    match suite {
        Suite::Theory => theory(),
        Suite::Lipschitz => lipschitz(),
        Suite::Kernel => kernel(),
        Suite::All => {
            let mut all = theory()?;
            all.extend(lipschitz()?);
            all.extend(kernel()?);
            Ok(all)
        }
    }
}

/// Prints one line per check; fails on the first failed property.
pub fn report(checks: &[Check], secs: f64) -> Result<(), CliError> {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status}  {:width$}  {}", c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed, {secs:.1} s", checks.len());
    match checks.iter().find(|c| !c.passed) {
        Some(c) => Err(CliError::Verification(c.name.clone())),
        None => Ok(()),
    }
}

pub fn run_and_report(suite: Suite) -> Result<(), CliError> {
    let start = Instant::now();
    let checks = run(suite)?;
    report(&checks, start.elapsed().as_secs_f64())
}

fn random_simplex(k: usize, rng: &mut RngState) -> Vec<f64> {
    let e: Vec<f64> = (0..k).map(|_| -rng.uniform(1e-12, 1.0).ln()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn theory() -> Checks {
    let mut out = Vec::new();
    let step = 0.05;
    for k in [2, 3] {
        for rule in [ScoringRule::Brier, ScoringRule::Log] {
            let mm = minimax_oracle(k, step, rule)?;
            let me = max_entropy_oracle(k, step, rule)?;
            let u = 1.0 / k as f64;
            let near = mm.point.iter().all(|p| (p - u).abs() <= step + 1e-12);
            let detail = if mm.point == me.point && near {
                format!("uniform is minimax optimal: {:?}", mm.point)
            } else {
                format!("minimax {:?} vs max-entropy {:?}", mm.point, me.point)
            };
            out.push(Check::new(
                format!("minimax_uniform k={k} {}", rule.name()),
                mm.point == me.point && near,
                detail,
            ));
        }
    }

    let mut rng = RngState::new(1);
    for rule in [ScoringRule::Brier, ScoringRule::Log] {
        let mut min_margin = f64::INFINITY;
        for _ in 0..100 {
            let k = 2 + (rng.next_u64() % 4) as usize;
            let p = random_simplex(k, &mut rng);
            let q = random_simplex(k, &mut rng);
            let expected = |pred: &[f64]| -> sngp::Result<f64> {
                (0..k).map(|y| Ok(q[y] * pointwise_score(pred, y, rule)?)).sum()
            };
            min_margin = min_margin.min(expected(&p)? - bregman_score(&q, &q, rule)?);
        }
        out.push(Check::new(
            format!("strict_propriety {}", rule.name()),
            min_margin > 0.0,
            format!("min margin {min_margin:.3e} over 100 pairs"),
        ));
    }

    let mut held = 0;
    for _ in 0..20 {
        let truth: Vec<Vec<f64>> = (0..200).map(|_| random_simplex(3, &mut rng)).collect();
        let model: Vec<Vec<f64>> = (0..200).map(|_| random_simplex(3, &mut rng)).collect();
        let c = l1_ece_bound_check(
            &Matrix::from_rows(&model)?,
            &Matrix::from_rows(&truth)?,
            100_000,
            &mut rng,
        )?;
        held += usize::from(c.holds);
    }
    out.push(Check::new("l1_bounds_ece", held == 20, format!("{held}/20 trials")));

    let n = 100_000;
    let mut probs = Matrix::zeros(n, 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let p = rng.uniform(0.0, 1.0);
        probs.row_mut(i).copy_from_slice(&[1.0 - p, p]);
        labels.push(usize::from(rng.uniform(0.0, 1.0) < p));
    }
    let e = ece(&PredictionSet::new(probs, labels)?, DEFAULT_ECE_BINS)?;
    out.push(Check::new("calibrated_ece", e <= 0.02, format!("ECE {e:.4}")));
    Ok(out)
}

fn sigma_max(w: &Matrix) -> sngp::Result<f64> {
    let u0 = vec![1.0; w.rows()];
    Ok(linalg::power_iteration(w, 500, &u0)?.0)
}

fn probe_pairs(n: usize, rng: &mut RngState) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let a = vec![rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)];
            let b = vec![rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)];
            (a, b)
        })
        .collect()
}

fn bound_checks(label: &str, net: &ResFfnNetwork, c: f64, rng: &mut RngState) -> Checks {
    let worst = net
        .blocks
        .iter()
        .map(|b| sigma_max(&b.layer.weight))
        .collect::<sngp::Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let depth = net.depth() as i32;
    let probe = lipschitz_probe(net, &probe_pairs(1000, rng))?;
    let (lo, hi) = ((1.0 - c).powi(depth), (1.0 + c).powi(depth));
    Ok(vec![
        Check::new(
            format!("spectral_bound {label}"),
            worst <= c + 1e-6,
            format!("max sigma {worst:.9} (c = {c})"),
        ),
        Check::new(
            format!("distance_bounds {label}"),
            probe.min_ratio >= lo && probe.max_ratio <= hi,
            format!(
                "ratio in [{:.4}, {:.4}], allowed [{lo:.4}, {hi:.4}]",
                probe.min_ratio, probe.max_ratio
            ),
        ),
    ])
}

fn lipschitz() -> Checks {
    let c = 0.9;
    let mut rng = RngState::new(3);
    let cfg = NetworkConfig {
        hidden_width: 32,
        depth: 3,
        sn_bound: c,
        dropout_rate: 0.0,
        ..NetworkConfig::default()
    };
    let mut net = ResFfnNetwork::new(&cfg, &mut rng)?;
    for b in &mut net.blocks {
        b.layer.weight.scale(5.0);
    }
    net.spectral_normalize(500)?;
    let mut out = bound_checks("random", &net, c, &mut rng)?;

    let data = gen_two_moons(250, 0.1, 1)?;
    let mut model = moons_model_config();
    model.network.hidden_width = 16;
    model.network.depth = 3;
    model.network.sn_bound = c;
    model.power_iterations = 5;
    let train = TrainConfig {
        epochs: 20,
        batch_size: 64,
        learning_rate: 0.05,
        precision_mode: PrecisionMode::Exact,
        ..TrainConfig::default()
    };
    let (m, _) = build_and_train(ModelVariant::Sngp, &model, &train, &data.points, &data.labels)?;
    let net = m.network.as_ref().expect("sngp has a residual network");
    out.extend(bound_checks("trained", net, c, &mut rng)?);
    Ok(out)
}

fn shallow_layer(num_features: usize, length_scale: f64, seed: u64) -> sngp::Result<RffGpLayer> {
    let cfg = GpConfig {
        num_features,
        length_scale,
        layer_norm: false,
        ..GpConfig::default()
    };
    RffGpLayer::new(2, 2, cfg, &mut RngState::new(seed))
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut p = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        p.row_mut(r).copy_from_slice(&linalg::softmax(logits.row(r)));
    }
    p
}

fn fitted_layer(num_features: usize, x: &Matrix, seed: u64) -> sngp::Result<RffGpLayer> {
    let mut layer = shallow_layer(num_features, 1.0, seed)?;
    let phi = layer.features_batch(x)?.0;
    let probs = softmax_rows(&layer.logits_batch(&phi)?);
    layer.update_precision_exact(&phi, &probs)?;
    Ok(layer)
}

fn kernel() -> Checks {
    let mut out = Vec::new();
    let mut rng = RngState::new(2);

    let layer = shallow_layer(4096, 1.0, 1)?;
    let mut close = 0;
    for _ in 0..100 {
        let a = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
        let b = [rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)];
        let approx = linalg::dot(&layer.rff_features(&a)?, &layer.rff_features(&b)?);
        let exact = (-linalg::distance(&a, &b).powi(2) / 2.0).exp();
        close += usize::from((approx - exact).abs() <= 0.05);
    }
    out.push(Check::new(
        "rbf_fidelity",
        close >= 95,
        format!("{close}/100 pairs within 0.05 (D_L = 4096)"),
    ));

    let mut layer = shallow_layer(32, 1.0, 4)?;
    layer.set_beta(rng.normal_matrix(2, 32, 1.0))?;
    let x = rng.normal_matrix(200, 2, 1.0);
    let phi = layer.features_batch(&x)?.0;
    let probs = softmax_rows(&layer.logits_batch(&phi)?);
    let mut exact = layer.clone();
    exact.update_precision_exact(&phi, &probs)?;
    layer.reset_precision();
    for _ in 0..20_000 {
        layer.update_precision_minibatch(&phi, &probs)?;
    }
    let mut worst = 0.0f64;
    for k in 0..2 {
        let mut diff = layer.class_precision(k).clone();
        diff.add_scaled(-1.0, exact.class_precision(k))?;
        worst = worst.max(diff.frobenius_norm() / exact.class_precision(k).frobenius_norm());
    }
    out.push(Check::new(
        "moving_average_precision",
        worst <= 1e-6,
        format!("relative Frobenius error {worst:.2e}"),
    ));

    let layer = fitted_layer(2048, &RngState::new(7).normal_matrix(200, 2, 1.0), 6)?;
    let far = [100.0 / 2f64.sqrt(), 100.0 / 2f64.sqrt()];
    let f = layer.rff_features(&far)?;
    let prior = linalg::dot(&f, &f) / layer.config.ridge;
    let v = layer.predictive_variance(&f, 0)?;
    let rel = (v - prior).abs() / prior;
    out.push(Check::new(
        "reverts_to_prior",
        rel <= 0.1,
        format!("variance within {:.2}% of prior", 100.0 * rel),
    ));

    let x = Matrix::from_vec(300, 2, rng.sample_uniform(600, -1.0, 1.0)?)?;
    let layer = fitted_layer(2048, &x, 8)?;
    let post = layer.posterior()?;
    let mut worst_rho = f64::INFINITY;
    for ray in 0..8 {
        let angle = ray as f64 * std::f64::consts::PI / 4.0 + 0.1;
        let radii: Vec<f64> = (0..20).map(|i| 2f64.sqrt() + 0.1 * i as f64).collect();
        let var = radii
            .iter()
            .map(|r| {
                let f = layer.rff_features(&[r * angle.cos(), r * angle.sin()])?;
                Ok(post.variances(&f)?[0])
            })
            .collect::<sngp::Result<Vec<f64>>>()?;
        worst_rho = worst_rho.min(spearman(&var, &radii)?);
    }
    out.push(Check::new(
        "distance_monotone",
        worst_rho >= 0.99,
        format!("min Spearman along 8 rays {worst_rho:.4}"),
    ));
    Ok(out)
}
