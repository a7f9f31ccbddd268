//! Random-Fourier-feature Gaussian-process output layer.
//!
//! Features are `Φ(h) = sqrt(2/D)·cos(−(1/l)·W h' + b)` with `W ~ N(0, 1)` and
//! `b ~ U(0, 2π)` frozen at construction, where `h'` is `h` after the optional
//! layer normalization and optional frozen Gaussian projection (in that order).
//! For unit length-scale `Φ(x)·Φ(x')` approximates `exp(−‖x − x'‖²/2)`.
//!
//! Logits are `g_k = Φ·β_k`. The Laplace posterior precision per class is
//! `s·I + Σ_i p_ik (1 − p_ik) Φ_i Φ_iᵀ`. The minibatch form is a moving
//! average of the per-batch posterior precision:
//!
//! ```text
//! P_t = m·P_{t−1} + (1 − m)·(s·I + Σ_{i∈batch} p_ik (1 − p_ik) Φ_i Φ_iᵀ),   P_0 = s·I
//! ```
//!
//! so the ridge never decays and the fixed point of a repeated batch is the
//! one-pass precision of that batch. Variances are computed by Cholesky solves
//! against the precision; the covariance is never formed.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Cholesky, Matrix, RngState};

const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GpConfig {
    /// Number of random features `D_L`.
    pub num_features: usize,
    pub length_scale: f64,
    /// Ridge factor `s`.
    pub ridge: f64,
    /// Discount `m` applied to the previous precision.
    pub discount: f64,
    pub layer_norm: bool,
    /// Target dimension of the frozen random projection, if any.
    pub projection_dim: Option<usize>,
    /// One precision matrix averaged over classes instead of one per class.
    pub shared_precision: bool,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            num_features: 1024,
            length_scale: 2.0,
            ridge: 0.001,
            discount: 0.999,
            layer_norm: true,
            projection_dim: None,
            shared_precision: false,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_features == 0 {
            return Err(Error::InvalidArgument("num_features must be positive".into()));
        }
        if !(self.length_scale > 0.0) {
            return Err(Error::InvalidArgument("length_scale must be positive".into()));
        }
        if !(self.ridge > 0.0) {
            return Err(Error::InvalidArgument("ridge must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidArgument("discount must be in [0, 1)".into()));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::InvalidArgument("projection_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RffGpLayer {
    pub config: GpConfig,
    input_dim: usize,
    num_classes: usize,
    /// `D_L × D_in'`, frozen.
    w_fixed: Matrix,
    /// `D_L`, frozen.
    b_fixed: Vec<f64>,
    /// `D_in' × D_in`, frozen.
    projection: Option<Matrix>,
    /// `K × D_L`.
    pub beta: Matrix,
    precision: Vec<Matrix>,
}

/// Intermediate values of [`RffGpLayer::features_batch`] needed for backprop.
#[derive(Debug, Clone)]
pub struct FeatureTape {
    /// Layer-normalized input (or the raw input if normalization is off).
    normalized: Matrix,
    /// Per-row `sqrt(var + eps)` of the layer norm.
    row_scale: Vec<f64>,
    /// `sin` of the cosine arguments.
    sin_args: Matrix,
}

impl RffGpLayer {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        config: GpConfig,
        rng: &mut RngState,
    ) -> Result<Self> {
        config.validate()?;
        if num_classes < 1 || input_dim == 0 {
            return Err(Error::InvalidArgument(
                "GP layer needs a positive input dimension and at least one class".into(),
            ));
        }
        let projection = config
            .projection_dim
            .map(|p| rng.normal_matrix(p, input_dim, 1.0));
        let feature_in = config.projection_dim.unwrap_or(input_dim);
        let w_fixed = rng.normal_matrix(config.num_features, feature_in, 1.0);
        let b_fixed = rng.sample_uniform(config.num_features, 0.0, 2.0 * std::f64::consts::PI)?;
        let beta = Matrix::zeros(num_classes, config.num_features);
        let mut layer = Self {
            config,
            input_dim,
            num_classes,
            w_fixed,
            b_fixed,
            projection,
            beta,
            precision: Vec::new(),
        };
        layer.reset_precision();
        Ok(layer)
    }

    /// Reassembles a layer from stored parts (checkpoint loading).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        config: GpConfig,
        input_dim: usize,
        w_fixed: Matrix,
        b_fixed: Vec<f64>,
        projection: Option<Matrix>,
        beta: Matrix,
        precision: Vec<Matrix>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.num_features;
        let feature_in = config.projection_dim.unwrap_or(input_dim);
        check_dim("RffGpLayer w_fixed rows", d, w_fixed.rows())?;
        check_dim("RffGpLayer w_fixed cols", feature_in, w_fixed.cols())?;
        check_dim("RffGpLayer b_fixed", d, b_fixed.len())?;
        if let Some(p) = &projection {
            check_dim("RffGpLayer projection", input_dim, p.cols())?;
            check_dim("RffGpLayer projection", feature_in, p.rows())?;
        }
        check_dim("RffGpLayer beta", d, beta.cols())?;
        let num_classes = beta.rows();
        let expected = if config.shared_precision { 1 } else { num_classes };
        check_dim("RffGpLayer precision count", expected, precision.len())?;
        for p in &precision {
            check_dim("RffGpLayer precision", d, p.rows())?;
            check_dim("RffGpLayer precision", d, p.cols())?;
        }
        Ok(Self {
            config,
            input_dim,
            num_classes,
            w_fixed,
            b_fixed,
            projection,
            beta,
            precision,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.config.num_features
    }

    pub fn w_fixed(&self) -> &Matrix {
        &self.w_fixed
    }

    pub fn b_fixed(&self) -> &[f64] {
        &self.b_fixed
    }

    pub fn projection(&self) -> Option<&Matrix> {
        self.projection.as_ref()
    }

    pub fn precision(&self) -> &[Matrix] {
        &self.precision
    }

    /// Precision matrix used for class `k`.
    pub fn class_precision(&self, k: usize) -> &Matrix {
        if self.config.shared_precision {
            &self.precision[0]
        } else {
            &self.precision[k]
        }
    }

    fn feature_scale(&self) -> f64 {
        (2.0 / self.config.num_features as f64).sqrt()
    }

    /// Random features for every row of `h`, with the tape for backprop.
    pub fn features_batch(&self, h: &Matrix) -> Result<(Matrix, FeatureTape)> {
        check_dim("RffGpLayer::features", self.input_dim, h.cols())?;
        let mut normalized = h.clone();
        let mut row_scale = vec![1.0; h.rows()];
        if self.config.layer_norm {
            for (r, scale) in row_scale.iter_mut().enumerate() {
                *scale = layer_norm_in_place(normalized.row_mut(r));
            }
        }
        let projected = match &self.projection {
            Some(p) => normalized.matmul_transpose(p)?,
            None => normalized.clone(),
        };
        let mut args = projected.matmul_transpose(&self.w_fixed)?;
        let inv_l = 1.0 / self.config.length_scale;
        let amp = self.feature_scale();
        let mut sin_args = Matrix::zeros(args.rows(), args.cols());
        for r in 0..args.rows() {
            let row = args.row_mut(r);
            let srow = sin_args.row_mut(r);
            for ((a, b), s) in row.iter_mut().zip(&self.b_fixed).zip(srow.iter_mut()) {
                let u = -inv_l * *a + b;
                *s = u.sin();
                *a = amp * u.cos();
            }
        }
        Ok((
            args,
            FeatureTape {
                normalized,
                row_scale,
                sin_args,
            },
        ))
    }

    /// `Φ(h)` for a single hidden vector.
    pub fn rff_features(&self, h: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, h.len(), h.to_vec())?;
        check_dim("RffGpLayer::rff_features", self.input_dim, h.len())?;
        Ok(self.features_batch(&m)?.0.into_vec())
    }

    /// Gradient with respect to the layer input given `∂L/∂Φ`.
    pub fn features_backward(&self, tape: &FeatureTape, grad_phi: &Matrix) -> Result<Matrix> {
        check_dim("RffGpLayer::features_backward", tape.sin_args.rows(), grad_phi.rows())?;
        check_dim(
            "RffGpLayer::features_backward",
            self.config.num_features,
            grad_phi.cols(),
        )?;
        // Φ = a cos(u), u = −(1/l) W h'' + b  ⇒  ∂L/∂h'' = (1/l) Wᵀ (a sin(u) ⊙ ∂L/∂Φ)
        let coeff = self.feature_scale() / self.config.length_scale;
        let mut s = grad_phi.clone();
        for (v, sn) in s.as_mut_slice().iter_mut().zip(tape.sin_args.as_slice()) {
            *v *= coeff * sn;
        }
        let d_projected = s.matmul(&self.w_fixed)?;
        let mut d_norm = match &self.projection {
            Some(p) => d_projected.matmul(p)?,
            None => d_projected,
        };
        if self.config.layer_norm {
            for r in 0..d_norm.rows() {
                layer_norm_backward(
                    d_norm.row_mut(r),
                    tape.normalized.row(r),
                    tape.row_scale[r],
                );
            }
        }
        Ok(d_norm)
    }

    /// `g_k = Φ·β_k`.
    pub fn logits(&self, phi: &[f64]) -> Result<Vec<f64>> {
        linalg::matvec(&self.beta, phi)
    }

    /// Batch logits `Φ βᵀ`.
    pub fn logits_batch(&self, phi: &Matrix) -> Result<Matrix> {
        phi.matmul_transpose(&self.beta)
    }

    /// Sets every precision matrix to `s·I`.
    pub fn reset_precision(&mut self) {
        let count = if self.config.shared_precision {
            1
        } else {
            self.num_classes
        };
        let mut p = Matrix::identity(self.config.num_features);
        p.scale(self.config.ridge);
        self.precision = vec![p; count];
    }

    /// Per-matrix Fisher weights `p(1 − p)` for each row; averaged over classes
    /// when the precision is shared.
    fn fisher_weights(&self, probs: &Matrix) -> Vec<Vec<f64>> {
        let k = self.num_classes;
        let per_class: Vec<Vec<f64>> = (0..k)
            .map(|c| probs.row_iter().map(|p| p[c] * (1.0 - p[c])).collect())
            .collect();
        if self.config.shared_precision {
            let n = probs.rows();
            vec![(0..n)
                .map(|i| per_class.iter().map(|w| w[i]).sum::<f64>() / k as f64)
                .collect()]
        } else {
            per_class
        }
    }

    fn check_batch(&self, phi: &Matrix, probs: &Matrix) -> Result<()> {
        check_dim("precision update (phi rows vs probs rows)", phi.rows(), probs.rows())?;
        check_dim("precision update (features)", self.config.num_features, phi.cols())?;
        check_dim("precision update (classes)", self.num_classes, probs.cols())?;
        for (i, row) in probs.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "probability row {i} is not on the simplex (sum {sum})"
                )));
            }
        }
        Ok(())
    }

    /// Moving-average update with discount `m` (see module docs).
    pub fn update_precision_minibatch(&mut self, phi: &Matrix, probs: &Matrix) -> Result<()> {
        self.check_batch(phi, probs)?;
        let m = self.config.discount;
        let s = self.config.ridge;
        let weights = self.fisher_weights(probs);
        for (prec, w) in self.precision.iter_mut().zip(&weights) {
            prec.scale(m);
            prec.add_to_diagonal((1.0 - m) * s);
            for (row, &wi) in phi.row_iter().zip(w) {
                prec.add_outer_upper((1.0 - m) * wi, row);
            }
            prec.mirror_upper();
        }
        Ok(())
    }

    /// One-pass precision `s·I + Σ_i p_ik (1 − p_ik) Φ_i Φ_iᵀ` over all data.
    pub fn update_precision_exact(&mut self, phi: &Matrix, probs: &Matrix) -> Result<()> {
        self.check_batch(phi, probs)?;
        self.reset_precision();
        let weights = self.fisher_weights(probs);
        for (prec, w) in self.precision.iter_mut().zip(&weights) {
            for (row, &wi) in phi.row_iter().zip(w) {
                prec.add_outer_upper(wi, row);
            }
            prec.mirror_upper();
        }
        Ok(())
    }

    /// `Φᵀ P_k⁻¹ Φ`.
    pub fn predictive_variance(&self, phi: &[f64], k: usize) -> Result<f64> {
        if k >= self.num_classes {
            return Err(Error::InvalidArgument(format!("class {k} out of range")));
        }
        check_dim("predictive_variance", self.config.num_features, phi.len())?;
        Cholesky::factor(self.class_precision(k))?.inv_quad_form(phi)
    }

    /// Factors the precision matrices once for repeated variance queries.
    pub fn posterior(&self) -> Result<GpPosterior> {
        let factors = self
            .precision
            .iter()
            .map(Cholesky::factor)
            .collect::<Result<Vec<_>>>()?;
        Ok(GpPosterior {
            factors,
            num_classes: self.num_classes,
        })
    }

    /// Replaces `β` (used by tests and checkpoint loading).
    pub fn set_beta(&mut self, beta: Matrix) -> Result<()> {
        check_dim("set_beta rows", self.num_classes, beta.rows())?;
        check_dim("set_beta cols", self.config.num_features, beta.cols())?;
        self.beta = beta;
        Ok(())
    }

    /// Overwrites the precision matrices; they must be square, `D_L`-sized.
    pub fn set_precision(&mut self, precision: Vec<Matrix>) -> Result<()> {
        let expected = if self.config.shared_precision {
            1
        } else {
            self.num_classes
        };
        check_dim("set_precision count", expected, precision.len())?;
        for p in &precision {
            check_dim("set_precision", self.config.num_features, p.rows())?;
            check_dim("set_precision", self.config.num_features, p.cols())?;
        }
        self.precision = precision;
        Ok(())
    }
}

/// Cholesky factors of the precision matrices.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    factors: Vec<Cholesky>,
    num_classes: usize,
}

impl GpPosterior {
    /// Per-class predictive variance of the logits at feature vector `phi`.
    pub fn variances(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if self.factors.len() == 1 {
            let v = self.factors[0].inv_quad_form(phi)?;
            Ok(vec![v; self.num_classes])
        } else {
            self.factors.iter().map(|f| f.inv_quad_form(phi)).collect()
        }
    }
}

/// Standardizes `x` in place; returns `sqrt(var + eps)`.
fn layer_norm_in_place(x: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = (var + LAYER_NORM_EPS).sqrt();
    x.iter_mut().for_each(|v| *v = (*v - mean) / scale);
    scale
}

/// Overwrites `grad` (∂L/∂y) with ∂L/∂x for `y = (x − mean)/scale`.
fn layer_norm_backward(grad: &mut [f64], y: &[f64], scale: f64) {
    let n = grad.len() as f64;
    let mean_g = grad.iter().sum::<f64>() / n;
    let mean_gy = linalg::dot(grad, y) / n;
    for (g, yi) in grad.iter_mut().zip(y) {
        *g = (*g - mean_g - yi * mean_gy) / scale;
    }
}

/// Mean of `softmax(mean + sqrt(var) ⊙ ε)` over `n_samples` standard normal draws.
/// Zero variance short-circuits to `softmax(mean)` without drawing.
pub fn mc_softmax(
    mean: &[f64],
    variance: &[f64],
    n_samples: usize,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    check_dim("mc_softmax", mean.len(), variance.len())?;
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if variance.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidArgument("variance must be non-negative".into()));
    }
    if variance.iter().all(|&v| v == 0.0) {
        return Ok(linalg::softmax(mean));
    }
    let sd: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
    let mut acc = vec![0.0; mean.len()];
    let mut draw = vec![0.0; mean.len()];
    for _ in 0..n_samples {
        for ((d, m), s) in draw.iter_mut().zip(mean).zip(&sd) {
            *d = m + s * rng.normal();
        }
        linalg::axpy(1.0, &linalg::softmax(&draw), &mut acc);
    }
    let total: f64 = acc.iter().sum();
    acc.iter_mut().for_each(|p| *p /= total);
    Ok(acc)
}

/// Output of a GP-head prediction for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub mean_logits: Vec<f64>,
    pub variance_logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Dempster–Shafer uncertainty of the mean logits.
    pub uncertainty_ds: f64,
}
