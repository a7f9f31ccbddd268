//! Minibatch training loop and its report.
//!
//! Each minibatch step runs, in order: SGD on all trainable parameters,
//! spectral normalization of every residual weight (when enabled), then the
//! precision update (only during the precision epoch, moving-average mode).
//! In exact mode the precision is rebuilt in one pass over the training data
//! after the precision epoch. Features for the precision are always taken in
//! evaluation mode, so dropout never enters the covariance.

use std::time::Instant;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Matrix, RngState};
use crate::model::SngpModel;
use crate::nn::Sgd;

const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrecisionMode {
    MovingAverage,
    Exact,
}

impl PrecisionMode {
    pub fn name(self) -> &'static str {
        match self {
            PrecisionMode::MovingAverage => "moving_average",
            PrecisionMode::Exact => "exact",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "moving_average" => Ok(Self::MovingAverage),
            "exact" => Ok(Self::Exact),
            other => Err(Error::InvalidArgument(format!("unknown precision mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_beta: f64,
    pub seed: u64,
    pub mc_samples: usize,
    /// Epoch (0-based) in which the precision is estimated; `None` = last.
    pub precision_update_epoch: Option<usize>,
    pub precision_mode: PrecisionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            l2_beta: 0.0,
            seed: 0,
            mc_samples: 10,
            precision_update_epoch: None,
            precision_mode: PrecisionMode::MovingAverage,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must be in [0, 1)".into()));
        }
        if !(self.l2_beta >= 0.0) {
            return Err(Error::InvalidArgument("l2_beta must be non-negative".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
        }
        if let Some(e) = self.precision_update_epoch {
            if self.epochs > 0 && e >= self.epochs {
                return Err(Error::InvalidArgument(format!(
                    "precision_update_epoch {e} is not below epochs {}",
                    self.epochs
                )));
            }
        }
        Ok(())
    }

    fn precision_epoch(&self) -> Option<usize> {
        if self.epochs == 0 {
            None
        } else {
            Some(self.precision_update_epoch.unwrap_or(self.epochs - 1))
        }
    }

    pub fn echo(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("learning_rate".into(), self.learning_rate.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("l2_beta".into(), self.l2_beta.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("mc_samples".into(), self.mc_samples.to_string()),
            (
                "precision_update_epoch".into(),
                self.precision_update_epoch
                    .map_or_else(|| "final".to_string(), |e| e.to_string()),
            ),
            ("precision_mode".into(), self.precision_mode.name().into()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainEvent {
    SgdStep { epoch: usize, step: usize },
    SpectralNorm { epoch: usize, step: usize },
    PrecisionUpdate { epoch: usize, step: usize },
    EpochEnd { epoch: usize, loss: f64 },
}

/// Instrumentation hook called as training progresses.
pub trait TrainObserver {
    fn observe(&mut self, event: &TrainEvent);
}

impl TrainObserver for () {
    fn observe(&mut self, _event: &TrainEvent) {}
}

impl TrainObserver for Vec<TrainEvent> {
    fn observe(&mut self, event: &TrainEvent) {
        self.push(event.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Loss of every minibatch step, in order.
    pub step_losses: Vec<f64>,
    pub train_accuracy: f64,
    pub wall_clock_secs: f64,
    pub config_echo: Vec<(String, String)>,
    pub seed: u64,
}

impl TrainReport {
    pub fn to_key_value(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config_echo {
            out.push_str(&format!("{k}={v}\n"));
        }
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("train_accuracy={}\n", self.train_accuracy));
        out.push_str(&format!(
            "final_loss={}\n",
            self.epoch_losses.last().copied().unwrap_or(f64::NAN)
        ));
        out.push_str(&format!("wall_clock_secs={:.3}\n", self.wall_clock_secs));
        for (e, l) in self.epoch_losses.iter().enumerate() {
            out.push_str(&format!("epoch_loss.{e}={l}\n"));
        }
        out
    }
}

/// Fraction of rows whose argmax mean logit equals the label.
pub fn accuracy(model: &SngpModel, x: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(x)?;
    let correct = logits
        .row_iter()
        .zip(labels)
        .filter(|(z, &y)| argmax(z) == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, v)| if v > b.1 { (i, v) } else { b })
        .0
}

/// MAP class probabilities `softmax(mean logits)` and evaluation-mode features.
fn features_and_probs(model: &SngpModel, x: &Matrix) -> Result<(Matrix, Matrix)> {
    let phi = model.features(x)?;
    let gp = model.gp().expect("features() succeeded, so the head is a GP");
    let logits = gp.logits_batch(&phi)?;
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        probs.row_mut(r).copy_from_slice(&linalg::softmax(logits.row(r)));
    }
    Ok((phi, probs))
}

pub fn train(
    model: &mut SngpModel,
    x: &Matrix,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<TrainReport> {
    train_with_observer(model, x, labels, config, &mut ())
}

pub fn train_with_observer(
    model: &mut SngpModel,
    x: &Matrix,
    labels: &[usize],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainReport> {
    config.validate()?;
    check_dim("train labels", x.rows(), labels.len())?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let start = Instant::now();
    let root = RngState::new(config.seed);
    let mut shuffle_rng = root.derive("shuffle");
    let mut dropout_rng = root.derive("dropout");
    let mut opt = Sgd::new(config.learning_rate, config.momentum)?;
    let n = x.rows();
    let precision_epoch = config.precision_epoch();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut step_losses = Vec::new();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let precision_now = precision_epoch == Some(epoch) && model.gp().is_some();
        if precision_now && config.precision_mode == PrecisionMode::MovingAverage {
            model.gp_mut().expect("checked").reset_precision();
        }
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let bx = x.select_rows(chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model
                .loss_and_grads(&bx, &by, config.l2_beta, n, true, &mut dropout_rng)
                .map_err(|e| match e {
                    Error::Diverged { loss, .. } => Error::Diverged { epoch, step, loss },
                    other => other,
                })?;
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { epoch, step, loss });
            }
            {
                let grad_slices = model.grad_slices(&grads);
                let mut params = model.param_slices_mut();
                opt.step(&mut params, &grad_slices)?;
            }
            observer.observe(&TrainEvent::SgdStep { epoch, step });

            if model.spectral_norm_enabled {
                let iters = model.power_iterations;
                if let Some(net) = model.network.as_mut() {
                    net.spectral_normalize(iters)?;
                }
                observer.observe(&TrainEvent::SpectralNorm { epoch, step });
            }

            if precision_now && config.precision_mode == PrecisionMode::MovingAverage {
                let (phi, probs) = features_and_probs(model, &bx)?;
                model
                    .gp_mut()
                    .expect("checked")
                    .update_precision_minibatch(&phi, &probs)?;
                observer.observe(&TrainEvent::PrecisionUpdate { epoch, step });
            }

            epoch_loss += loss * chunk.len() as f64;
            seen += chunk.len();
            step_losses.push(loss);
            step += 1;
        }
        if precision_now && config.precision_mode == PrecisionMode::Exact {
            let (phi, probs) = features_and_probs(model, x)?;
            model
                .gp_mut()
                .expect("checked")
                .update_precision_exact(&phi, &probs)?;
            observer.observe(&TrainEvent::PrecisionUpdate { epoch, step });
        }
        let mean_loss = epoch_loss / seen as f64;
        observer.observe(&TrainEvent::EpochEnd {
            epoch,
            loss: mean_loss,
        });
        epoch_losses.push(mean_loss);
    }

    let train_accuracy = accuracy(model, x, labels)?;
    Ok(TrainReport {
        epoch_losses,
        step_losses,
        train_accuracy,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config_echo: config.echo(),
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::GpConfig;
    use crate::model::{HeadKind, ModelConfig};
    use crate::nn::{Activation, NetworkConfig};

    fn small_model(seed: u64) -> SngpModel {
        let cfg = ModelConfig {
            network: NetworkConfig {
                input_dim: 2,
                hidden_width: 16,
                depth: 3,
                activation: Activation::Relu,
                dropout_rate: 0.0,
                sn_bound: 0.9,
                train_input_projection: true,
            },
            gp: GpConfig {
                num_features: 64,
                length_scale: 1.0,
                ..GpConfig::default()
            },
            head: HeadKind::Gp,
            ..ModelConfig::default()
        };
        SngpModel::new(&cfg, &mut RngState::new(seed)).unwrap()
    }

    #[test]
    fn zero_epochs_changes_nothing() {
        let mut m = small_model(1);
        let before = m.clone();
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &x, &[0, 1], &cfg).unwrap();
        assert_eq!(m, before);
        assert!(r.epoch_losses.is_empty());
        let s = m.gp().unwrap().config.ridge;
        let mut ridge = Matrix::identity(64);
        ridge.scale(s);
        assert!(m.gp().unwrap().precision().iter().all(|p| *p == ridge));
    }

    #[test]
    fn two_points_are_separated() {
        let mut m = small_model(2);
        let x = Matrix::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0]]).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let r = train(&mut m, &x, &[0, 1], &cfg).unwrap();
        assert_eq!(r.train_accuracy, 1.0);
        assert_eq!(r.step_losses.len(), 200);
    }

    #[test]
    fn sub_steps_run_in_order() {
        let mut m = small_model(3);
        let x = RngState::new(4).normal_matrix(10, 2, 1.0);
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let mut events: Vec<TrainEvent> = Vec::new();
        train_with_observer(&mut m, &x, &y, &cfg, &mut events).unwrap();
        use TrainEvent::*;
        let kinds: Vec<&str> = events
            .iter()
            .map(|e| match e {
                SgdStep { .. } => "sgd",
                SpectralNorm { .. } => "sn",
                PrecisionUpdate { .. } => "prec",
                EpochEnd { .. } => "end",
            })
            .collect();
        assert_eq!(
            kinds,
            vec!["sgd", "sn", "sgd", "sn", "end", "sgd", "sn", "prec", "sgd", "sn", "prec", "end"]
        );
    }

    #[test]
    fn exact_mode_updates_once_after_epoch() {
        let mut m = small_model(3);
        let x = RngState::new(4).normal_matrix(10, 2, 1.0);
        let y: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 5,
            precision_mode: PrecisionMode::Exact,
            ..TrainConfig::default()
        };
        let mut events: Vec<TrainEvent> = Vec::new();
        train_with_observer(&mut m, &x, &y, &cfg, &mut events).unwrap();
        let prec: Vec<_> = events
            .iter()
            .filter(|e| matches!(e, TrainEvent::PrecisionUpdate { .. }))
            .collect();
        assert_eq!(prec.len(), 1);
        assert!(matches!(events.last(), Some(TrainEvent::EpochEnd { .. })));
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = small_model(5);
        // every point appears with both labels, so no step can fit the batch
        let base = RngState::new(6).normal_matrix(4, 2, 50.0);
        let x = base.select_rows(&[0, 0, 1, 1, 2, 2, 3, 3]);
        let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 8,
            learning_rate: 1e12,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        let err = train(&mut m, &x, &y, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn rejects_bad_config() {
        let mut m = small_model(5);
        let x = Matrix::zeros(2, 2);
        for cfg in [
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                mc_samples: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 3,
                precision_update_epoch: Some(3),
                ..TrainConfig::default()
            },
        ] {
            assert!(train(&mut m, &x, &[0, 1], &cfg).is_err());
        }
        assert!(train(&mut m, &Matrix::zeros(0, 2), &[], &TrainConfig::default()).is_err());
    }
}
