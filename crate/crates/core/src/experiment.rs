//! The two-moons uncertainty benchmark: train models on the moons, then
//! score how their uncertainty tracks distance from the training data and
//! how well it separates a held-out OOD cluster from fresh in-domain points.

use std::time::Instant;

use crate::baselines::{build_and_train, train_ensemble, ModelVariant, Trained, UncertaintyMetric};
use crate::data::{distance_to_set, gen_two_moons, EvalGrid};
use crate::error::Result;
use crate::gp::GpConfig;
use crate::linalg::{Matrix, RngState};
use crate::metrics::{aupr, auroc, spearman};
use crate::model::ModelConfig;
use crate::nn::{Activation, NetworkConfig};
use crate::train::{PrecisionMode, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct MoonsBenchmark {
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub noise_sd: f64,
    pub grid: EvalGrid,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ensemble_size: usize,
}

impl Default for MoonsBenchmark {
    fn default() -> Self {
        Self {
            n_per_class: 500,
            n_test_per_class: 250,
            noise_sd: 0.1,
            grid: EvalGrid::new((-3.0, 4.0), (-3.5, 3.5), 100, 100).expect("valid grid"),
            model: moons_model_config(),
            train: TrainConfig {
                epochs: 60,
                batch_size: 128,
                learning_rate: 0.02,
                momentum: 0.9,
                precision_mode: PrecisionMode::Exact,
                ..TrainConfig::default()
            },
            ensemble_size: 3,
        }
    }
}

/// A compact residual network suited to 2D inputs: frozen input projection,
/// no feature normalization before the random features.
pub fn moons_model_config() -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        network: NetworkConfig {
            input_dim: 2,
            hidden_width: 64,
            depth: 4,
            activation: Activation::Relu,
            dropout_rate: 0.0,
            sn_bound: 0.95,
            train_input_projection: false,
        },
        gp: GpConfig {
            num_features: 512,
            length_scale: 2.0,
            layer_norm: false,
            ..GpConfig::default()
        },
        ..ModelConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoonsOutcome {
    /// Spearman correlation of SNGP logit variance with distance to the
    /// training set, over the grid.
    pub variance_distance_spearman: f64,
    /// Same correlation for the ensemble's margin uncertainty.
    pub ensemble_distance_spearman: f64,
    pub sngp_ood_mean: f64,
    pub sngp_ind_mean: f64,
    pub sngp_aupr: f64,
    pub sngp_auroc: f64,
    pub ensemble_aupr: f64,
    pub ensemble_auroc: f64,
    pub sngp_train_accuracy: f64,
    pub wall_clock_secs: f64,
}

/// Trains SNGP and a deep ensemble on one moons draw and scores both.
pub fn run_two_moons(bench: &MoonsBenchmark, seed: u64) -> Result<MoonsOutcome> {
    let start = Instant::now();
    let train_set = gen_two_moons(bench.n_per_class, bench.noise_sd, seed)?;
    let test_set = gen_two_moons(bench.n_test_per_class, bench.noise_sd, seed.wrapping_add(1_000_003))?;
    let ood = train_set
        .ood_points
        .clone()
        .expect("moons generator always adds OOD points");
    let tc = TrainConfig {
        seed,
        ..bench.train.clone()
    };
    let (sngp, report) = build_and_train(
        ModelVariant::Sngp,
        &bench.model,
        &tc,
        &train_set.points,
        &train_set.labels,
    )?;
    let sngp = Trained::Single(sngp);
    let (ens, _) = train_ensemble(
        &bench.model,
        &tc,
        bench.ensemble_size,
        &train_set.points,
        &train_set.labels,
    )?;
    let ens = Trained::Ensemble(ens);

    let grid = bench.grid.points();
    let dist: Vec<f64> = grid
        .row_iter()
        .map(|p| distance_to_set(p, &train_set.points))
        .collect();
    let mut rng = RngState::new(seed).derive("predict");
    let mc = tc.mc_samples;
    let var_grid = sngp.uncertainty(&grid, UncertaintyMetric::Variance, mc, &mut rng)?;
    let ens_grid = ens.uncertainty(&grid, UncertaintyMetric::Margin, mc, &mut rng)?;

    let eval_x = stack(&test_set.points, &ood)?;
    let positives: Vec<bool> = (0..eval_x.rows()).map(|i| i >= test_set.len()).collect();
    let sngp_u = sngp.uncertainty(&eval_x, UncertaintyMetric::Variance, mc, &mut rng)?;
    let ens_u = ens.uncertainty(&eval_x, UncertaintyMetric::Margin, mc, &mut rng)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;

    Ok(MoonsOutcome {
        variance_distance_spearman: spearman(&var_grid, &dist)?,
        ensemble_distance_spearman: spearman(&ens_grid, &dist)?,
        sngp_ood_mean: mean(&sngp_u[test_set.len()..]),
        sngp_ind_mean: mean(&sngp_u[..test_set.len()]),
        sngp_aupr: aupr(&sngp_u, &positives)?,
        sngp_auroc: auroc(&sngp_u, &positives)?,
        ensemble_aupr: aupr(&ens_u, &positives)?,
        ensemble_auroc: auroc(&ens_u, &positives)?,
        sngp_train_accuracy: report.train_accuracy,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Rows of `a` followed by rows of `b`.
pub fn stack(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    crate::error::check_dim("stack", a.cols(), b.cols())?;
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
}
