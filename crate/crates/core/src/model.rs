//! The composed classifier `logits(x) = g(h(x))`, its loss and gradients,
//! and prediction.

use crate::error::{check_dim, Error, Result};
use crate::gp::{mc_softmax, GpConfig, GpPrediction, RffGpLayer};
use crate::linalg::{self, Matrix, RngState};
use crate::metrics::dempster_shafer;
use crate::nn::{DenseLayer, NetworkConfig, NetworkGrads, ResFfnNetwork};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Gp,
    Dense,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Gp => "gp",
            HeadKind::Dense => "dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Gp(RffGpLayer),
    Dense(DenseLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub network: NetworkConfig,
    pub gp: GpConfig,
    pub head: HeadKind,
    pub spectral_norm: bool,
    /// Skip the residual network entirely: `h(x) = x`.
    pub identity_hidden: bool,
    pub power_iterations: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            network: NetworkConfig::default(),
            gp: GpConfig::default(),
            head: HeadKind::Gp,
            spectral_norm: true,
            identity_hidden: false,
            power_iterations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SngpModel {
    /// `None` means the hidden map is the identity.
    pub network: Option<ResFfnNetwork>,
    pub head: Head,
    pub spectral_norm_enabled: bool,
    pub power_iterations: usize,
    pub num_classes: usize,
    input_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrads {
    Gp { beta: Matrix },
    Dense { weight: Matrix, bias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub network: Option<NetworkGrads>,
    pub head: HeadGrads,
}

impl ModelGrads {
    /// Flattened in the order of [`SngpModel::param_slices_mut`].
    pub fn slices(&self, with_projection: bool) -> Vec<&[f64]> {
        let mut out = self
            .network
            .as_ref()
            .map(|g| g.slices(with_projection))
            .unwrap_or_default();
        match &self.head {
            HeadGrads::Gp { beta } => out.push(beta.as_slice()),
            HeadGrads::Dense { weight, bias } => {
                out.push(weight.as_slice());
                out.push(bias.as_slice());
            }
        }
        out
    }
}

impl SngpModel {
    /// Builds a model; all random initialization is drawn from `rng`.
    pub fn new(config: &ModelConfig, rng: &mut RngState) -> Result<Self> {
        if config.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        let input_dim = config.network.input_dim;
        let network = if config.identity_hidden {
            None
        } else {
            Some(ResFfnNetwork::new(&config.network, rng)?)
        };
        let hidden = network.as_ref().map_or(input_dim, ResFfnNetwork::hidden_width);
        let head = match config.head {
            HeadKind::Gp => Head::Gp(RffGpLayer::new(
                hidden,
                config.num_classes,
                config.gp.clone(),
                rng,
            )?),
            HeadKind::Dense => {
                let mut layer = DenseLayer::new(hidden, config.num_classes, 1.0, rng);
                // Glorot-ish scale keeps initial logits O(1)
                layer.weight.scale((0.5f64).sqrt());
                Head::Dense(layer)
            }
        };
        Ok(Self {
            network,
            head,
            spectral_norm_enabled: config.spectral_norm && !config.identity_hidden,
            power_iterations: config.power_iterations,
            num_classes: config.num_classes,
            input_dim,
        })
    }

    pub fn from_parts(
        network: Option<ResFfnNetwork>,
        head: Head,
        spectral_norm_enabled: bool,
        power_iterations: usize,
        input_dim: usize,
    ) -> Result<Self> {
        let hidden = match &network {
            Some(n) => {
                check_dim("model input", input_dim, n.input_dim())?;
                n.hidden_width()
            }
            None => input_dim,
        };
        let num_classes = match &head {
            Head::Gp(g) => {
                check_dim("head input", hidden, g.input_dim())?;
                g.num_classes()
            }
            Head::Dense(d) => {
                check_dim("head input", hidden, d.input_dim())?;
                d.output_dim()
            }
        };
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        Ok(Self {
            network,
            head,
            spectral_norm_enabled,
            power_iterations,
            num_classes,
            input_dim,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn head_kind(&self) -> HeadKind {
        match self.head {
            Head::Gp(_) => HeadKind::Gp,
            Head::Dense(_) => HeadKind::Dense,
        }
    }

    pub fn gp(&self) -> Option<&RffGpLayer> {
        match &self.head {
            Head::Gp(g) => Some(g),
            Head::Dense(_) => None,
        }
    }

    pub fn gp_mut(&mut self) -> Option<&mut RffGpLayer> {
        match &mut self.head {
            Head::Gp(g) => Some(g),
            Head::Dense(_) => None,
        }
    }

    fn train_projection(&self) -> bool {
        self.network
            .as_ref()
            .is_some_and(|n| n.train_input_projection)
    }

    /// Evaluation-mode hidden representation.
    pub fn hidden(&self, x: &Matrix) -> Result<Matrix> {
        check_dim("SngpModel::hidden", self.input_dim, x.cols())?;
        match &self.network {
            Some(n) => n.forward_eval(x),
            None => Ok(x.clone()),
        }
    }

    /// Evaluation-mode random features (GP head only).
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        let gp = self
            .gp()
            .ok_or_else(|| Error::Incompatible("model has a dense head".into()))?;
        Ok(gp.features_batch(&self.hidden(x)?)?.0)
    }

    /// Evaluation-mode mean logits for a batch.
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let h = self.hidden(x)?;
        match &self.head {
            Head::Gp(g) => g.logits_batch(&g.features_batch(&h)?.0),
            Head::Dense(d) => d.forward(&h),
        }
    }

    /// Trainable parameter slices: network (projection only if trainable),
    /// then head.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let with_projection = self.train_projection();
        let mut out = match &mut self.network {
            Some(n) => n.param_slices_mut(with_projection),
            None => Vec::new(),
        };
        match &mut self.head {
            Head::Gp(g) => out.push(g.beta.as_mut_slice()),
            Head::Dense(d) => {
                out.push(d.weight.as_mut_slice());
                out.push(d.bias.as_mut_slice());
            }
        }
        out
    }

    /// Every parameter slice including a frozen projection (gradient checks).
    pub fn all_param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = match &mut self.network {
            Some(n) => n.param_slices_mut(true),
            None => Vec::new(),
        };
        match &mut self.head {
            Head::Gp(g) => out.push(g.beta.as_mut_slice()),
            Head::Dense(d) => {
                out.push(d.weight.as_mut_slice());
                out.push(d.bias.as_mut_slice());
            }
        }
        out
    }

    pub fn grad_slices<'a>(&self, grads: &'a ModelGrads) -> Vec<&'a [f64]> {
        grads.slices(self.train_projection())
    }

    /// Squared norm of the output weights (`β`, or the dense head weight).
    fn head_weight_sq_norm(&self) -> f64 {
        match &self.head {
            Head::Gp(g) => linalg::dot(g.beta.as_slice(), g.beta.as_slice()),
            Head::Dense(d) => linalg::dot(d.weight.as_slice(), d.weight.as_slice()),
        }
    }

    /// Mean cross-entropy plus `l2_beta · ½‖β‖² / n_scale`, and its gradients.
    pub fn loss_and_grads(
        &self,
        x: &Matrix,
        labels: &[usize],
        l2_beta: f64,
        n_scale: usize,
        train_mode: bool,
        rng: &mut RngState,
    ) -> Result<(f64, ModelGrads)> {
        check_dim("loss_and_grads labels", x.rows(), labels.len())?;
        if x.rows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range")));
        }
        let (h, tape) = match &self.network {
            Some(n) => {
                let (h, t) = n.forward(x, train_mode, rng)?;
                (h, Some(t))
            }
            None => (x.clone(), None),
        };
        let batch = x.rows() as f64;
        let l2 = l2_beta / n_scale.max(1) as f64;

        let (logits, feat) = match &self.head {
            Head::Gp(g) => {
                let (phi, ft) = g.features_batch(&h)?;
                (g.logits_batch(&phi)?, Some((phi, ft)))
            }
            Head::Dense(d) => (d.forward(&h)?, None),
        };

        let mut ce = 0.0;
        let mut d_logits = Matrix::zeros(logits.rows(), logits.cols());
        for (i, &y) in labels.iter().enumerate() {
            let z = logits.row(i);
            ce += linalg::log_sum_exp(z) - z[y];
            let p = linalg::softmax(z);
            let row = d_logits.row_mut(i);
            for (k, (d, pk)) in row.iter_mut().zip(&p).enumerate() {
                *d = (pk - if k == y { 1.0 } else { 0.0 }) / batch;
            }
        }
        let loss = ce / batch + 0.5 * l2 * self.head_weight_sq_norm();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step: 0,
                loss,
            });
        }

        let (head_grads, d_h) = match (&self.head, feat) {
            (Head::Gp(g), Some((phi, ft))) => {
                let mut beta = d_logits.transpose_matmul(&phi)?;
                linalg::axpy(l2, g.beta.as_slice(), beta.as_mut_slice());
                let d_phi = d_logits.matmul(&g.beta)?;
                let d_h = g.features_backward(&ft, &d_phi)?;
                (HeadGrads::Gp { beta }, d_h)
            }
            (Head::Dense(d), _) => {
                let mut weight = d_logits.transpose_matmul(&h)?;
                linalg::axpy(l2, d.weight.as_slice(), weight.as_mut_slice());
                let mut bias = vec![0.0; d.output_dim()];
                for r in d_logits.row_iter() {
                    linalg::axpy(1.0, r, &mut bias);
                }
                let d_h = d_logits.matmul(&d.weight)?;
                (HeadGrads::Dense { weight, bias }, d_h)
            }
            (Head::Gp(_), None) => unreachable!("GP head always produces features"),
        };
        let network = match (&self.network, tape) {
            (Some(n), Some(t)) => Some(n.backward(&t, &d_h)?),
            _ => None,
        };
        Ok((
            loss,
            ModelGrads {
                network,
                head: head_grads,
            },
        ))
    }

    /// Single-input prediction. Factors the precision on every call; use
    /// [`SngpModel::predict_batch`] for many inputs.
    pub fn predict(&self, x: &[f64], mc_samples: usize, rng: &mut RngState) -> Result<GpPrediction> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.predict_batch(&m, mc_samples, rng)?.remove(0))
    }

    /// Mean logits, per-class logit variance, MC-averaged probabilities and
    /// the Dempster–Shafer score for each row. Dense heads report zero
    /// variance and plain softmax probabilities.
    pub fn predict_batch(
        &self,
        x: &Matrix,
        mc_samples: usize,
        rng: &mut RngState,
    ) -> Result<Vec<GpPrediction>> {
        let h = self.hidden(x)?;
        match &self.head {
            Head::Gp(g) => {
                let (phi, _) = g.features_batch(&h)?;
                let logits = g.logits_batch(&phi)?;
                let posterior = g.posterior()?;
                phi.row_iter()
                    .zip(logits.row_iter())
                    .map(|(f, z)| {
                        let variance = posterior.variances(f)?;
                        let probs = mc_softmax(z, &variance, mc_samples, rng)?;
                        Ok(GpPrediction {
                            mean_logits: z.to_vec(),
                            variance_logits: variance,
                            probs,
                            uncertainty_ds: dempster_shafer(z),
                        })
                    })
                    .collect()
            }
            Head::Dense(d) => {
                let logits = d.forward(&h)?;
                Ok(logits
                    .row_iter()
                    .map(|z| GpPrediction {
                        mean_logits: z.to_vec(),
                        variance_logits: vec![0.0; z.len()],
                        probs: linalg::softmax(z),
                        uncertainty_ds: dempster_shafer(z),
                    })
                    .collect())
            }
        }
    }
}

/// Posterior variance of the logit (mean over classes; for two classes
/// both entries coincide).
pub fn logit_variance_uncertainty(pred: &GpPrediction) -> f64 {
    pred.variance_logits.iter().sum::<f64>() / pred.variance_logits.len().max(1) as f64
}

/// `1 − 2·|p − 0.5|` for binary predictions.
pub fn prob_margin_uncertainty(pred: &GpPrediction) -> Result<f64> {
    if pred.probs.len() != 2 {
        return Err(Error::Incompatible(format!(
            "margin uncertainty needs 2 classes, got {}",
            pred.probs.len()
        )));
    }
    Ok(margin_from_prob(pred.probs[1]))
}

pub fn margin_from_prob(p: f64) -> f64 {
    1.0 - 2.0 * (p - 0.5).abs()
}
