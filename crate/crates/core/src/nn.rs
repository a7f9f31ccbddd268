//! Residual feed-forward hidden map with hand-written backpropagation.
//!
//! The network is an input projection `P(x) = W_p x + b_p` (dense, not
//! residual) followed by blocks `h ← h + σ(W_l h + b_l)`. Spectral
//! normalization applies to the block weights `W_l` only; biases and the
//! projection are never rescaled.
//!
//! Proposition-style distance bounds: if every block satisfies
//! `‖σ(W_l·)‖_Lip ≤ ‖W_l‖₂ ≤ c < 1` (true for 1-Lipschitz activations such as
//! ReLU, so the Lipschitz constant α of each block is identified with `c`),
//! then for the residual stack `R`
//! `(1 − c)^depth ‖z − z'‖ ≤ ‖R(z) − R(z')‖ ≤ (1 + c)^depth ‖z − z'‖`.
//! [`lipschitz_probe`] measures exactly this ratio, in the projected space.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - pre.tanh().powi(2),
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::InvalidArgument(format!("unknown activation `{other}`"))),
        }
    }
}

/// Dense layer `y = W x + b` with persisted power-iteration state.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Left singular vector estimate, warm start for the next power iteration.
    pub sn_u: Vec<f64>,
    /// Spectral norm bound `c`.
    pub sn_bound: f64,
}

impl DenseLayer {
    /// He-scaled normal weights (`sd = sqrt(2 / in)`), zero bias.
    pub fn new(input: usize, output: usize, sn_bound: f64, rng: &mut RngState) -> Self {
        let sd = (2.0 / input.max(1) as f64).sqrt();
        let weight = rng.normal_matrix(output, input, sd);
        let mut sn_u = rng.sample_normal(output);
        let n = linalg::norm(&sn_u);
        if n > 0.0 {
            sn_u.iter_mut().for_each(|v| *v /= n);
        }
        Self {
            weight,
            bias: vec![0.0; output],
            sn_u,
            sn_bound,
        }
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>, sn_bound: f64) -> Result<Self> {
        check_dim("DenseLayer::from_parts", weight.rows(), bias.len())?;
        let out = weight.rows();
        let mut sn_u = vec![0.0; out];
        if out > 0 {
            sn_u.iter_mut().for_each(|v| *v = 1.0 / (out as f64).sqrt());
        }
        Ok(Self {
            weight,
            bias,
            sn_u,
            sn_bound,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Row-wise `x Wᵀ + b` for a batch.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul_transpose(&self.weight)?;
        for r in 0..out.rows() {
            linalg::axpy(1.0, &self.bias, out.row_mut(r));
        }
        Ok(out)
    }

    /// One normalization step: `power_iters` power iterations warm-started
    /// from `sn_u` give `λ̂`; if `c < λ̂` the weight becomes `c·W/λ̂`,
    /// otherwise it is left alone. Returns `λ̂`.
    pub fn spectral_normalize(&mut self, power_iters: usize) -> Result<f64> {
        if !(self.sn_bound > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "spectral norm bound must be positive, got {}",
                self.sn_bound
            )));
        }
        let (lambda, u) = linalg::power_iteration(&self.weight, power_iters, &self.sn_u)?;
        self.sn_u = u;
        if self.sn_bound < lambda {
            self.weight.scale(self.sn_bound / lambda);
        }
        Ok(lambda)
    }
}

/// `h ↦ h + σ(W h + b)`, with inverted dropout on the branch in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub layer: DenseLayer,
    pub activation: Activation,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub sn_bound: f64,
    /// When false the input projection keeps its random initial weights.
    pub train_input_projection: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_dim: 2,
            hidden_width: 128,
            depth: 12,
            activation: Activation::Relu,
            dropout_rate: 0.01,
            sn_bound: 0.95,
            train_input_projection: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResFfnNetwork {
    pub input_projection: DenseLayer,
    pub blocks: Vec<ResidualBlock>,
    pub train_input_projection: bool,
}

/// Activations cached by [`ResFfnNetwork::forward`] for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTape {
    input: Matrix,
    /// Input of each block; `block_inputs[0]` is the projection output.
    block_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    /// Scaled dropout masks (`0` or `1/(1-rate)`), present only in training mode.
    masks: Vec<Option<Matrix>>,
    signature: (usize, usize, usize),
}

impl ForwardTape {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weight: Matrix::zeros(layer.output_dim(), layer.input_dim()),
            bias: vec![0.0; layer.output_dim()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub input_projection: LayerGrads,
    pub blocks: Vec<LayerGrads>,
}

impl NetworkGrads {
    /// Gradient slices in declared parameter order (projection W, b, then
    /// each block's W, b). The projection is skipped when `with_projection`
    /// is false.
    pub fn slices(&self, with_projection: bool) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 + 2 * self.blocks.len());
        if with_projection {
            out.push(self.input_projection.weight.as_slice());
            out.push(self.input_projection.bias.as_slice());
        }
        for g in &self.blocks {
            out.push(g.weight.as_slice());
            out.push(g.bias.as_slice());
        }
        out
    }
}

impl ResFfnNetwork {
    pub fn new(config: &NetworkConfig, rng: &mut RngState) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must be in [0, 1), got {}",
                config.dropout_rate
            )));
        }
        if config.input_dim == 0 || config.hidden_width == 0 {
            return Err(Error::InvalidArgument(
                "input dimension and hidden width must be positive".into(),
            ));
        }
        let mut input_projection = DenseLayer::new(
            config.input_dim,
            config.hidden_width,
            config.sn_bound,
            rng,
        );
        if !config.train_input_projection {
            // frozen: rescale to sd 1/sqrt(width) so E‖Wx‖² = ‖x‖²
            let sd = (2.0 / config.input_dim as f64).sqrt();
            input_projection
                .weight
                .scale(1.0 / (sd * (config.hidden_width as f64).sqrt()));
        }
        // residual branches start scaled by 1/sqrt(depth) so the stack's
        // output variance stays bounded without spectral normalization
        let branch_scale = 1.0 / (config.depth.max(1) as f64).sqrt();
        let blocks = (0..config.depth)
            .map(|_| {
                let mut layer = DenseLayer::new(
                    config.hidden_width,
                    config.hidden_width,
                    config.sn_bound,
                    rng,
                );
                layer.weight.scale(branch_scale);
                ResidualBlock {
                    layer,
                    activation: config.activation,
                    dropout_rate: config.dropout_rate,
                }
            })
            .collect();
        Ok(Self {
            input_projection,
            blocks,
            train_input_projection: config.train_input_projection,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_projection.input_dim()
    }

    pub fn hidden_width(&self) -> usize {
        self.input_projection.output_dim()
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn signature(&self) -> (usize, usize, usize) {
        (self.input_dim(), self.hidden_width(), self.depth())
    }

    /// Forward pass. Dropout masks are drawn from `rng` only when `train_mode`
    /// is set and the block's rate is positive.
    pub fn forward(
        &self,
        x: &Matrix,
        train_mode: bool,
        rng: &mut RngState,
    ) -> Result<(Matrix, ForwardTape)> {
        check_dim("ResFfnNetwork::forward", self.input_dim(), x.cols())?;
        let mut h = self.input_projection.forward(x)?;
        let mut block_inputs = Vec::with_capacity(self.blocks.len());
        let mut pre_activations = Vec::with_capacity(self.blocks.len());
        let mut masks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let pre = block.layer.forward(&h)?;
            let mut branch = pre.clone();
            branch
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = block.activation.apply(*v));
            let mask = if train_mode && block.dropout_rate > 0.0 {
                let keep = 1.0 - block.dropout_rate;
                let mut m = Matrix::zeros(branch.rows(), branch.cols());
                for (mv, bv) in m.as_mut_slice().iter_mut().zip(branch.as_mut_slice()) {
                    *mv = if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 };
                    *bv *= *mv;
                }
                Some(m)
            } else {
                None
            };
            let mut next = h.clone();
            linalg::axpy(1.0, branch.as_slice(), next.as_mut_slice());
            block_inputs.push(std::mem::replace(&mut h, next));
            pre_activations.push(pre);
            masks.push(mask);
        }
        let tape = ForwardTape {
            input: x.clone(),
            block_inputs,
            pre_activations,
            masks,
            signature: self.signature(),
        };
        Ok((h, tape))
    }

    /// Evaluation-mode forward without a tape.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        let z = self.input_projection.forward(x)?;
        self.residual_stack(&z)
    }

    /// Applies only the residual blocks (evaluation mode) to projected inputs.
    pub fn residual_stack(&self, z: &Matrix) -> Result<Matrix> {
        check_dim("ResFfnNetwork::residual_stack", self.hidden_width(), z.cols())?;
        let mut h = z.clone();
        for block in &self.blocks {
            let pre = block.layer.forward(&h)?;
            for (hv, pv) in h.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *hv += block.activation.apply(*pv);
            }
        }
        Ok(h)
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the network output is `grad_h`.
    pub fn backward(&self, tape: &ForwardTape, grad_h: &Matrix) -> Result<NetworkGrads> {
        if tape.signature != self.signature() {
            return Err(Error::InvalidArgument(
                "forward tape was produced by a different network".into(),
            ));
        }
        check_dim("ResFfnNetwork::backward", tape.batch_size(), grad_h.rows())?;
        check_dim("ResFfnNetwork::backward", self.hidden_width(), grad_h.cols())?;

        let mut dh = grad_h.clone();
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate().rev() {
            let pre = &tape.pre_activations[l];
            let mut da = dh.clone();
            if let Some(mask) = &tape.masks[l] {
                for (d, m) in da.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *d *= m;
                }
            }
            for (d, p) in da.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *d *= block.activation.derivative(*p);
            }
            let weight = da.transpose_matmul(&tape.block_inputs[l])?;
            let bias = column_sums(&da);
            let through = da.matmul(&block.layer.weight)?;
            linalg::axpy(1.0, through.as_slice(), dh.as_mut_slice());
            block_grads.push(LayerGrads { weight, bias });
        }
        block_grads.reverse();
        let input_projection = LayerGrads {
            weight: dh.transpose_matmul(&tape.input)?,
            bias: column_sums(&dh),
        };
        Ok(NetworkGrads {
            input_projection,
            blocks: block_grads,
        })
    }

    pub fn zero_grads(&self) -> NetworkGrads {
        NetworkGrads {
            input_projection: LayerGrads::zeros_like(&self.input_projection),
            blocks: self
                .blocks
                .iter()
                .map(|b| LayerGrads::zeros_like(&b.layer))
                .collect(),
        }
    }

    /// Mutable parameter slices, same order as [`NetworkGrads::slices`].
    pub fn param_slices_mut(&mut self, with_projection: bool) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 + 2 * self.blocks.len());
        if with_projection {
            let p = &mut self.input_projection;
            out.push(p.weight.as_mut_slice());
            out.push(p.bias.as_mut_slice());
        }
        for b in &mut self.blocks {
            out.push(b.layer.weight.as_mut_slice());
            out.push(b.layer.bias.as_mut_slice());
        }
        out
    }

    /// Normalizes every residual block weight; returns the `λ̂` estimates.
    pub fn spectral_normalize(&mut self, power_iters: usize) -> Result<Vec<f64>> {
        self.blocks
            .iter_mut()
            .map(|b| b.layer.spectral_normalize(power_iters))
            .collect()
    }
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in m.row_iter() {
        linalg::axpy(1.0, r, &mut out);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzProbe {
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub evaluated: usize,
    /// Pairs whose projected inputs coincide.
    pub skipped: usize,
}

/// Extremes of `‖h(x) − h(x')‖ / ‖P(x) − P(x')‖` over the given pairs,
/// evaluated without dropout.
pub fn lipschitz_probe(
    net: &ResFfnNetwork,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<LipschitzProbe> {
    let d = net.input_dim();
    let mut a = Matrix::zeros(pairs.len(), d);
    let mut b = Matrix::zeros(pairs.len(), d);
    for (i, (x, y)) in pairs.iter().enumerate() {
        check_dim("lipschitz_probe", d, x.len())?;
        check_dim("lipschitz_probe", d, y.len())?;
        a.row_mut(i).copy_from_slice(x);
        b.row_mut(i).copy_from_slice(y);
    }
    let za = net.input_projection.forward(&a)?;
    let zb = net.input_projection.forward(&b)?;
    let ha = net.residual_stack(&za)?;
    let hb = net.residual_stack(&zb)?;
    let mut probe = LipschitzProbe {
        min_ratio: f64::INFINITY,
        max_ratio: 0.0,
        evaluated: 0,
        skipped: 0,
    };
    for i in 0..pairs.len() {
        let denom = linalg::distance(za.row(i), zb.row(i));
        if denom == 0.0 {
            probe.skipped += 1;
            continue;
        }
        let ratio = linalg::distance(ha.row(i), hb.row(i)) / denom;
        probe.min_ratio = probe.min_ratio.min(ratio);
        probe.max_ratio = probe.max_ratio.max(ratio);
        probe.evaluated += 1;
    }
    Ok(probe)
}

/// SGD with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "need learning_rate > 0 and momentum in [0, 1), got {learning_rate}, {momentum}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        check_dim("Sgd::step", params.len(), grads.len())?;
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        check_dim("Sgd::step", self.velocity.len(), grads.len())?;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            check_dim("Sgd::step", p.len(), g.len())?;
            check_dim("Sgd::step", v.len(), g.len())?;
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}
