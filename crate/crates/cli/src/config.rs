//! Plain-text run configuration: one `key=value` per line, `#` starts a
//! comment, unknown or repeated keys are rejected.
//!
//! Defaults are the compact two-moons setup (see [`RunConfig::default`]);
//! [`RunConfig::echo`] lists every effective value in a fixed order.

use std::collections::HashSet;
use std::str::FromStr;

use sngp::baselines::ModelVariant;
use sngp::data::{gen_two_moons, gen_two_ovals, Dataset2D, DEFAULT_MOONS_NOISE};
use sngp::experiment::moons_model_config;
use sngp::model::ModelConfig;
use sngp::nn::Activation;
use sngp::train::{PrecisionMode, TrainConfig};

use crate::error::CliError;

/// Added to `data_seed` to draw held-out test points from the generator.
pub const TEST_SEED_OFFSET: u64 = 1_000_003;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    TwoOvals,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::TwoOvals => "two_ovals",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, CliError> {
        match s {
            "two_moons" => Ok(Self::TwoMoons),
            "two_ovals" => Ok(Self::TwoOvals),
            other => Err(CliError::Usage(format!(
                "unknown dataset `{other}` (expected two_moons or two_ovals)"
            ))),
        }
    }

    pub fn generate(self, n_per_class: usize, noise: f64, seed: u64) -> Result<Dataset2D, CliError> {
        Ok(match self {
            DatasetKind::TwoMoons => gen_two_moons(n_per_class, noise, seed)?,
            DatasetKind::TwoOvals => gen_two_ovals(n_per_class, seed)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: ModelVariant,
    pub dataset: DatasetKind,
    /// Read training data from this CSV instead of generating it.
    pub data_path: Option<String>,
    pub n_per_class: usize,
    pub noise: f64,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ensemble_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let bench = sngp::experiment::MoonsBenchmark::default();
        Self {
            variant: ModelVariant::Sngp,
            dataset: DatasetKind::TwoMoons,
            data_path: None,
            n_per_class: bench.n_per_class,
            noise: DEFAULT_MOONS_NOISE,
            data_seed: 0,
            model: moons_model_config(),
            train: bench.train,
            ensemble_size: 10,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Usage(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn usage(e: sngp::Error) -> CliError {
    CliError::Usage(e.to_string())
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("config line {}: expected key=value, got `{line}`", i + 1))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(CliError::Usage(format!("config line {}: `{key}` set twice", i + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<(), CliError> {
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override `{pair}` is not key=value")))?;
            self.set(key.trim(), value.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let net = &mut self.model.network;
        let gp = &mut self.model.gp;
        let tr = &mut self.train;
        match key {
            "variant" => self.variant = ModelVariant::from_tag(value).map_err(usage)?,
            "dataset" => self.dataset = DatasetKind::from_name(value)?,
            "data_path" => {
                self.data_path = if value.is_empty() || value == "none" {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            "n_per_class" => self.n_per_class = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "num_classes" => self.model.num_classes = parse(key, value)?,
            "hidden_width" => net.hidden_width = parse(key, value)?,
            "depth" => net.depth = parse(key, value)?,
            "activation" => net.activation = Activation::from_name(value).map_err(usage)?,
            "dropout_rate" => net.dropout_rate = parse(key, value)?,
            "sn_bound" => net.sn_bound = parse(key, value)?,
            "train_input_projection" => net.train_input_projection = parse_bool(key, value)?,
            "power_iterations" => self.model.power_iterations = parse(key, value)?,
            "num_features" => gp.num_features = parse(key, value)?,
            "length_scale" => gp.length_scale = parse(key, value)?,
            "ridge" => gp.ridge = parse(key, value)?,
            "discount" => gp.discount = parse(key, value)?,
            "layer_norm" => gp.layer_norm = parse_bool(key, value)?,
            "projection_dim" => {
                let d: usize = parse(key, value)?;
                gp.projection_dim = (d > 0).then_some(d);
            }
            "shared_precision" => gp.shared_precision = parse_bool(key, value)?,
            "epochs" => tr.epochs = parse(key, value)?,
            "batch_size" => tr.batch_size = parse(key, value)?,
            "learning_rate" => tr.learning_rate = parse(key, value)?,
            "momentum" => tr.momentum = parse(key, value)?,
            "l2_beta" => tr.l2_beta = parse(key, value)?,
            "seed" => tr.seed = parse(key, value)?,
            "mc_samples" => tr.mc_samples = parse(key, value)?,
            "precision_update_epoch" => {
                tr.precision_update_epoch = match value {
                    "final" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "precision_mode" => tr.precision_mode = PrecisionMode::from_name(value).map_err(usage)?,
            "ensemble_size" => self.ensemble_size = parse(key, value)?,
            other => return Err(CliError::Usage(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_per_class == 0 {
            return Err(CliError::Usage("n_per_class must be positive".into()));
        }
        if self.ensemble_size == 0 {
            return Err(CliError::Usage("ensemble_size must be positive".into()));
        }
        self.train.validate().map_err(usage)?;
        self.model.gp.validate().map_err(usage)?;
        Ok(())
    }

    /// Every effective setting, in a fixed order.
    pub fn echo(&self) -> Vec<(String, String)> {
        let net = &self.model.network;
        let gp = &self.model.gp;
        let mut out: Vec<(String, String)> = vec![
            ("variant".into(), self.variant.tag().into()),
            ("dataset".into(), self.dataset.name().into()),
            ("data_path".into(), self.data_path.clone().unwrap_or_else(|| "none".into())),
            ("n_per_class".into(), self.n_per_class.to_string()),
            ("noise".into(), self.noise.to_string()),
            ("data_seed".into(), self.data_seed.to_string()),
            ("num_classes".into(), self.model.num_classes.to_string()),
            ("hidden_width".into(), net.hidden_width.to_string()),
            ("depth".into(), net.depth.to_string()),
            ("activation".into(), net.activation.name().into()),
            ("dropout_rate".into(), net.dropout_rate.to_string()),
            ("sn_bound".into(), net.sn_bound.to_string()),
            ("train_input_projection".into(), net.train_input_projection.to_string()),
            ("power_iterations".into(), self.model.power_iterations.to_string()),
            ("num_features".into(), gp.num_features.to_string()),
            ("length_scale".into(), gp.length_scale.to_string()),
            ("ridge".into(), gp.ridge.to_string()),
            ("discount".into(), gp.discount.to_string()),
            ("layer_norm".into(), gp.layer_norm.to_string()),
            ("projection_dim".into(), gp.projection_dim.unwrap_or(0).to_string()),
            ("shared_precision".into(), gp.shared_precision.to_string()),
        ];
        out.extend(self.train.echo());
        out.push(("ensemble_size".into(), self.ensemble_size.to_string()));
        out
    }

    pub fn echo_text(&self) -> String {
        self.echo().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// The training set: read from `data_path` or generated.
    pub fn training_data(&self) -> Result<Dataset2D, CliError> {
        match &self.data_path {
            Some(path) => {
                let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
                Ok(Dataset2D::read_csv(file)?)
            }
            None => self.dataset.generate(self.n_per_class, self.noise, self.data_seed),
        }
    }

    /// A fresh draw from the same generator for held-out evaluation.
    pub fn test_data(&self, n_per_class: usize) -> Result<Dataset2D, CliError> {
        self.dataset
            .generate(n_per_class, self.noise, self.data_seed.wrapping_add(TEST_SEED_OFFSET))
    }
}
