//! Comparison models: the deterministic network, a deep ensemble, a
//! shallow random-feature GP on raw inputs, and the two single-component
//! ablations (GP head without spectral norm, spectral norm without GP head).
//!
//! MC dropout and DUQ are not implemented.

use std::thread;

use crate::error::{Error, Result};
use crate::gp::GpPrediction;
use crate::linalg::{self, Matrix, RngState};
use crate::metrics::dempster_shafer;
use crate::model::{
    logit_variance_uncertainty, prob_margin_uncertainty, HeadKind, ModelConfig, SngpModel,
};
use crate::train::{train, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelVariant {
    Deterministic,
    DeepEnsemble,
    ShallowGp,
    DnnGp,
    DnnSn,
    Sngp,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 6] = [
        ModelVariant::Deterministic,
        ModelVariant::DeepEnsemble,
        ModelVariant::ShallowGp,
        ModelVariant::DnnGp,
        ModelVariant::DnnSn,
        ModelVariant::Sngp,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            ModelVariant::Deterministic => "deterministic",
            ModelVariant::DeepEnsemble => "deep_ensemble",
            ModelVariant::ShallowGp => "shallow_gp",
            ModelVariant::DnnGp => "dnn_gp",
            ModelVariant::DnnSn => "dnn_sn",
            ModelVariant::Sngp => "sngp",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown model variant `{tag}`")))
    }

    /// Applies the variant's toggles (spectral norm, head kind, identity
    /// hidden map) to `base`. Ensemble members use the deterministic toggles.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        let (sn, head, identity) = match self {
            ModelVariant::Deterministic | ModelVariant::DeepEnsemble => {
                (false, HeadKind::Dense, false)
            }
            ModelVariant::ShallowGp => (false, HeadKind::Gp, true),
            ModelVariant::DnnGp => (false, HeadKind::Gp, false),
            ModelVariant::DnnSn => (true, HeadKind::Dense, false),
            ModelVariant::Sngp => (true, HeadKind::Gp, false),
        };
        cfg.spectral_norm = sn;
        cfg.head = head;
        cfg.identity_hidden = identity;
        if identity {
            // raw 2D inputs: normalizing them would collapse all directions
            cfg.gp.layer_norm = false;
            cfg.gp.projection_dim = None;
        }
        cfg
    }

    pub fn is_ensemble(self) -> bool {
        self == ModelVariant::DeepEnsemble
    }
}

/// Builds one (untrained) model with the variant's toggles.
pub fn build_variant(variant: ModelVariant, base: &ModelConfig, rng: &mut RngState) -> Result<SngpModel> {
    SngpModel::new(&variant.model_config(base), rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<SngpModel>,
}

impl EnsembleModel {
    pub fn new(members: Vec<SngpModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one member".into()))?;
        let (k, d) = (first.num_classes, first.input_dim());
        if members.iter().any(|m| m.num_classes != k || m.input_dim() != d) {
            return Err(Error::Incompatible("ensemble members disagree on shape".into()));
        }
        Ok(Self { members })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Seed of the model built and trained for ensemble member `i`.
pub fn member_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64)
}

/// Builds and trains one model whose initialization and training streams
/// both derive from `config.seed`.
pub fn build_and_train(
    variant: ModelVariant,
    base: &ModelConfig,
    config: &TrainConfig,
    x: &Matrix,
    labels: &[usize],
) -> Result<(SngpModel, TrainReport)> {
    let mut init = RngState::new(config.seed).derive("init");
    let mut model = build_variant(variant, base, &mut init)?;
    let report = train(&mut model, x, labels, config)?;
    Ok((model, report))
}

/// Trains `size` deterministic members with seeds `seed + 0 .. seed + size − 1`.
pub fn train_ensemble(
    base: &ModelConfig,
    config: &TrainConfig,
    size: usize,
    x: &Matrix,
    labels: &[usize],
) -> Result<(EnsembleModel, Vec<TrainReport>)> {
    let seeds: Vec<u64> = (0..size).map(|i| member_seed(config.seed, i)).collect();
    train_ensemble_with_seeds(base, config, &seeds, x, labels)
}

/// Trains one member per seed, concurrently. A failing member aborts with
/// its index.
pub fn train_ensemble_with_seeds(
    base: &ModelConfig,
    config: &TrainConfig,
    seeds: &[u64],
    x: &Matrix,
    labels: &[usize],
) -> Result<(EnsembleModel, Vec<TrainReport>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ensemble size must be at least 1".into()));
    }
    let results: Vec<Result<(SngpModel, TrainReport)>> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                s.spawn(move || {
                    let cfg = TrainConfig {
                        seed,
                        ..config.clone()
                    };
                    build_and_train(ModelVariant::DeepEnsemble, base, &cfg, x, labels)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ensemble member thread panicked"))
            .collect()
    });
    let mut members = Vec::with_capacity(seeds.len());
    let mut reports = Vec::with_capacity(seeds.len());
    for (member, r) in results.into_iter().enumerate() {
        let (m, rep) = r.map_err(|e| Error::Member {
            member,
            source: Box::new(e),
        })?;
        members.push(m);
        reports.push(rep);
    }
    Ok((EnsembleModel::new(members)?, reports))
}

/// Mean of the members' softmax outputs.
pub fn ensemble_predict(ens: &EnsembleModel, x: &Matrix) -> Result<Matrix> {
    let mut acc: Option<Matrix> = None;
    for m in &ens.members {
        let logits = m.logits(x)?;
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        for r in 0..logits.rows() {
            probs.row_mut(r).copy_from_slice(&linalg::softmax(logits.row(r)));
        }
        match &mut acc {
            None => acc = Some(probs),
            Some(a) => a.add_scaled(1.0, &probs)?,
        }
    }
    let mut mean = acc.expect("ensemble is never empty");
    mean.scale(1.0 / ens.size() as f64);
    Ok(mean)
}

/// Which scalar uncertainty to read off a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UncertaintyMetric {
    /// Posterior logit variance (GP heads only).
    Variance,
    /// `1 − 2|p − 0.5|` (two classes only).
    Margin,
    /// Dempster–Shafer `K / (K + Σ exp z)`.
    DempsterShafer,
}

impl UncertaintyMetric {
    pub fn name(self) -> &'static str {
        match self {
            UncertaintyMetric::Variance => "variance",
            UncertaintyMetric::Margin => "margin",
            UncertaintyMetric::DempsterShafer => "ds",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Self::Variance),
            "margin" => Ok(Self::Margin),
            "ds" => Ok(Self::DempsterShafer),
            other => Err(Error::InvalidArgument(format!("unknown uncertainty metric `{other}`"))),
        }
    }
}

/// A trained single model or ensemble behind one prediction interface.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Trained {
    Single(SngpModel),
    Ensemble(EnsembleModel),
}

impl Trained {
    pub fn members(&self) -> &[SngpModel] {
        match self {
            Trained::Single(m) => std::slice::from_ref(m),
            Trained::Ensemble(e) => &e.members,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.members()[0].num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.members()[0].input_dim()
    }

    /// Per-row predictions. Ensembles report the mean member logits, zero
    /// logit variance and the averaged member probabilities.
    pub fn predict(&self, x: &Matrix, mc_samples: usize, rng: &mut RngState) -> Result<Vec<GpPrediction>> {
        match self {
            Trained::Single(m) => m.predict_batch(x, mc_samples, rng),
            Trained::Ensemble(e) => {
                let probs = ensemble_predict(e, x)?;
                let mut logits = Matrix::zeros(x.rows(), self.num_classes());
                for m in &e.members {
                    logits.add_scaled(1.0 / e.size() as f64, &m.logits(x)?)?;
                }
                Ok(probs
                    .row_iter()
                    .zip(logits.row_iter())
                    .map(|(p, z)| GpPrediction {
                        mean_logits: z.to_vec(),
                        variance_logits: vec![0.0; z.len()],
                        probs: p.to_vec(),
                        uncertainty_ds: dempster_shafer(z),
                    })
                    .collect())
            }
        }
    }

    pub fn has_gp_head(&self) -> bool {
        matches!(self, Trained::Single(m) if m.gp().is_some())
    }

    /// Uncertainty of each row under `metric`.
    pub fn uncertainty(
        &self,
        x: &Matrix,
        metric: UncertaintyMetric,
        mc_samples: usize,
        rng: &mut RngState,
    ) -> Result<Vec<f64>> {
        if metric == UncertaintyMetric::Variance && !self.has_gp_head() {
            return Err(Error::Incompatible(
                "variance uncertainty needs a GP output layer".into(),
            ));
        }
        let preds = self.predict(x, mc_samples, rng)?;
        preds
            .iter()
            .map(|p| match metric {
                UncertaintyMetric::Variance => Ok(logit_variance_uncertainty(p)),
                UncertaintyMetric::Margin => prob_margin_uncertainty(p),
                UncertaintyMetric::DempsterShafer => Ok(p.uncertainty_ds),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, DenseLayer, NetworkConfig};
    use crate::model::Head;

    fn base() -> ModelConfig {
        ModelConfig {
            network: NetworkConfig {
                input_dim: 2,
                hidden_width: 8,
                depth: 2,
                activation: Activation::Relu,
                dropout_rate: 0.0,
                sn_bound: 0.9,
                train_input_projection: true,
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn variant_toggles() {
        let mut rng = RngState::new(0);
        let m = build_variant(ModelVariant::Sngp, &base(), &mut rng).unwrap();
        assert!(m.spectral_norm_enabled && m.gp().is_some());
        let m = build_variant(ModelVariant::DnnGp, &base(), &mut rng).unwrap();
        assert!(!m.spectral_norm_enabled && m.gp().is_some());
        let m = build_variant(ModelVariant::DnnSn, &base(), &mut rng).unwrap();
        assert!(m.spectral_norm_enabled && m.gp().is_none());
        let m = build_variant(ModelVariant::Deterministic, &base(), &mut rng).unwrap();
        assert!(!m.spectral_norm_enabled && m.gp().is_none());
        let z = m.logits(&Matrix::zeros(1, 2)).unwrap();
        let ds = dempster_shafer(z.row(0));
        assert!(ds > 0.0 && ds < 1.0);
        let m = build_variant(ModelVariant::ShallowGp, &base(), &mut rng).unwrap();
        let x = rng.normal_matrix(4, 2, 1.0);
        assert_eq!(m.hidden(&x).unwrap(), x);
        assert!(!m.gp().unwrap().config.layer_norm);
        for v in ModelVariant::ALL {
            assert_eq!(ModelVariant::from_tag(v.tag()).unwrap(), v);
        }
        assert!(ModelVariant::from_tag("mc_dropout").is_err());
    }

    fn constant_member(bias: [f64; 2]) -> SngpModel {
        let head = Head::Dense(DenseLayer::from_parts(Matrix::zeros(2, 2), bias.to_vec(), 1.0).unwrap());
        SngpModel::from_parts(None, head, false, 1, 2).unwrap()
    }

    #[test]
    fn ensemble_averages_probabilities() {
        let ens = EnsembleModel::new(vec![
            constant_member([50.0, -50.0]),
            constant_member([-50.0, 50.0]),
        ])
        .unwrap();
        let p = ensemble_predict(&ens, &Matrix::zeros(3, 2)).unwrap();
        for r in p.row_iter() {
            assert!((r[0] - 0.5).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
        }
        let ens = EnsembleModel::new(vec![
            constant_member([0.0, 0.0]),
            constant_member([2f64.ln(), 0.0]),
            constant_member([0.0, 3f64.ln()]),
        ])
        .unwrap();
        let p = ensemble_predict(&ens, &Matrix::zeros(1, 2)).unwrap();
        let hand = (0.5 + 2.0 / 3.0 + 0.25) / 3.0;
        assert!((p.row(0)[0] - hand).abs() < 1e-15);
        assert!((p.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_ensembles() {
        let x = RngState::new(1).normal_matrix(20, 2, 1.0);
        let y: Vec<usize> = (0..20).map(|i| usize::from(x.row(i)[0] > 0.0)).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            seed: 7,
            ..TrainConfig::default()
        };
        let (ens, reports) = train_ensemble(&base(), &cfg, 1, &x, &y).unwrap();
        assert_eq!(reports.len(), 1);
        let (single, _) = build_and_train(ModelVariant::Deterministic, &base(), &cfg, &x, &y).unwrap();
        assert_eq!(ens.members[0], single);

        let (ens, _) = train_ensemble_with_seeds(&base(), &cfg, &[4, 4, 4], &x, &y).unwrap();
        let p = ensemble_predict(&ens, &x).unwrap();
        let member = ensemble_predict(&EnsembleModel::new(vec![ens.members[0].clone()]).unwrap(), &x).unwrap();
        for (a, b) in p.as_slice().iter().zip(member.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn member_failure_reports_index() {
        let x = RngState::new(1).normal_matrix(4, 2, 1.0);
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        // label 5 is out of range for a 2-class model
        let err = train_ensemble(&base(), &cfg, 2, &x, &[0, 1, 5, 0]).unwrap_err();
        assert!(matches!(err, Error::Member { member: 0, .. }), "{err}");
    }

    #[test]
    fn variance_needs_gp_head() {
        let t = Trained::Single(constant_member([0.0, 0.0]));
        let x = Matrix::zeros(2, 2);
        let mut rng = RngState::new(0);
        assert!(matches!(
            t.uncertainty(&x, UncertaintyMetric::Variance, 10, &mut rng),
            Err(Error::Incompatible(_))
        ));
        let u = t.uncertainty(&x, UncertaintyMetric::Margin, 10, &mut rng).unwrap();
        assert_eq!(u, vec![1.0, 1.0]);
    }
}
