//! Versioned binary checkpoints.
//!
//! All integers are little-endian `u64` unless noted, all reals are
//! little-endian IEEE-754 `f64`, so a save/load round trip is bit-exact.
//!
//! ```text
//! magic        8 bytes  "SNGPCKPT"
//! version      u32      currently 1
//! variant      string   model variant tag
//! config       string   `key=value` lines of the run configuration
//! members      u64      1 for a single model, E for an ensemble
//! member*      model
//!
//! string  = u64 byte length, UTF-8 bytes
//! vector  = u64 length, reals
//! matrix  = u64 rows, u64 cols, reals row-major
//! flag    = one byte, 0 or 1
//!
//! model   = input_dim, num_classes, power_iterations, flag spectral_norm,
//!           flag has_network, [network], u8 head kind (0 = gp, 1 = dense), head
//! network = string activation, real dropout_rate, flag train_projection,
//!           layer input_projection, u64 depth, layer* blocks
//! layer   = matrix weight, vector bias, vector power-iteration state, real bound
//! gp head = u64 num_features, real length_scale, real ridge, real discount,
//!           flag layer_norm, u64 projection_dim (0 = none), flag shared,
//!           u64 input_dim, matrix w_fixed, vector b_fixed, [matrix projection],
//!           matrix beta, u64 count, matrix* precision
//! dense head = layer
//! ```

use std::io::{Read, Write};

use crate::baselines::{EnsembleModel, ModelVariant, Trained};
use crate::error::{Error, Result};
use crate::gp::{GpConfig, RffGpLayer};
use crate::linalg::Matrix;
use crate::model::{Head, SngpModel};
use crate::nn::{Activation, DenseLayer, ResFfnNetwork, ResidualBlock};

pub const MAGIC: &[u8; 8] = b"SNGPCKPT";
pub const VERSION: u32 = 1;
/// Guards against absurd allocations from corrupt length fields.
const MAX_LEN: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: ModelVariant,
    pub config_echo: Vec<(String, String)>,
    pub model: Trained,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.0.extend_from_slice(&VERSION.to_le_bytes());
        w.string(self.variant.tag());
        let echo: String = self
            .config_echo
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        w.string(&echo);
        let members = self.model.members();
        w.u64(members.len() as u64);
        for m in members {
            w.model(m);
        }
        w.0
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let variant = ModelVariant::from_tag(&r.string()?)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let config_echo = r
            .string()?
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let count = r.len()?;
        let members = (0..count).map(|_| r.model()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let model = if variant.is_ensemble() {
            Trained::Ensemble(EnsembleModel::new(members)?)
        } else {
            let mut members = members;
            if members.len() != 1 {
                return Err(Error::Checkpoint(format!(
                    "variant {} stores one model, found {}",
                    variant.tag(),
                    members.len()
                )));
            }
            Trained::Single(members.remove(0))
        };
        Ok(Self {
            variant,
            config_echo,
            model,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn flag(&mut self, v: bool) {
        self.0.push(u8::from(v));
    }

    fn string(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }

    fn reals(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }

    fn vector(&mut self, v: &[f64]) {
        self.usize(v.len());
        self.reals(v);
    }

    fn matrix(&mut self, m: &Matrix) {
        self.usize(m.rows());
        self.usize(m.cols());
        self.reals(m.as_slice());
    }

    fn layer(&mut self, l: &DenseLayer) {
        self.matrix(&l.weight);
        self.vector(&l.bias);
        self.vector(&l.sn_u);
        self.f64(l.sn_bound);
    }

    fn model(&mut self, m: &SngpModel) {
        self.usize(m.input_dim());
        self.usize(m.num_classes);
        self.usize(m.power_iterations);
        self.flag(m.spectral_norm_enabled);
        self.flag(m.network.is_some());
        if let Some(n) = &m.network {
            let (activation, dropout) = n
                .blocks
                .first()
                .map_or((Activation::Relu, 0.0), |b| (b.activation, b.dropout_rate));
            self.string(activation.name());
            self.f64(dropout);
            self.flag(n.train_input_projection);
            self.layer(&n.input_projection);
            self.usize(n.blocks.len());
            for b in &n.blocks {
                self.layer(&b.layer);
            }
        }
        match &m.head {
            Head::Gp(g) => {
                self.0.push(0);
                let c = &g.config;
                self.usize(c.num_features);
                self.f64(c.length_scale);
                self.f64(c.ridge);
                self.f64(c.discount);
                self.flag(c.layer_norm);
                self.usize(c.projection_dim.unwrap_or(0));
                self.flag(c.shared_precision);
                self.usize(g.input_dim());
                self.matrix(g.w_fixed());
                self.vector(g.b_fixed());
                if let Some(p) = g.projection() {
                    self.matrix(p);
                }
                self.matrix(&g.beta);
                self.usize(g.precision().len());
                for p in g.precision() {
                    self.matrix(p);
                }
            }
            Head::Dense(d) => {
                self.0.push(1);
                self.layer(d);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::Checkpoint(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(Error::Checkpoint(format!("bad flag byte {b}"))),
        }
    }

    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn vector(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        self.reals(n)
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.len()?;
        let cols = self.len()?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint("matrix size overflow".into()))?;
        Matrix::from_vec(rows, cols, self.reals(n)?)
    }

    fn layer(&mut self) -> Result<DenseLayer> {
        let weight = self.matrix()?;
        let bias = self.vector()?;
        let sn_u = self.vector()?;
        let sn_bound = self.f64()?;
        let mut layer = DenseLayer::from_parts(weight, bias, sn_bound)?;
        if sn_u.len() != layer.output_dim() {
            return Err(Error::Checkpoint("power-iteration state has wrong length".into()));
        }
        layer.sn_u = sn_u;
        Ok(layer)
    }

    fn model(&mut self) -> Result<SngpModel> {
        let input_dim = self.len()?;
        let num_classes = self.len()?;
        let power_iterations = self.len()?;
        let sn = self.flag()?;
        let network = if self.flag()? {
            let activation = Activation::from_name(&self.string()?)?;
            let dropout_rate = self.f64()?;
            let train_input_projection = self.flag()?;
            let input_projection = self.layer()?;
            let depth = self.len()?;
            let blocks = (0..depth)
                .map(|_| {
                    Ok(ResidualBlock {
                        layer: self.layer()?,
                        activation,
                        dropout_rate,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(ResFfnNetwork {
                input_projection,
                blocks,
                train_input_projection,
            })
        } else {
            None
        };
        let head = match self.take(1)?[0] {
            0 => {
                let num_features = self.len()?;
                let length_scale = self.f64()?;
                let ridge = self.f64()?;
                let discount = self.f64()?;
                let layer_norm = self.flag()?;
                let projection_dim = match self.len()? {
                    0 => None,
                    p => Some(p),
                };
                let shared_precision = self.flag()?;
                let config = GpConfig {
                    num_features,
                    length_scale,
                    ridge,
                    discount,
                    layer_norm,
                    projection_dim,
                    shared_precision,
                };
                let gp_in = self.len()?;
                let w_fixed = self.matrix()?;
                let b_fixed = self.vector()?;
                let projection = projection_dim.map(|_| self.matrix()).transpose()?;
                let beta = self.matrix()?;
                let count = self.len()?;
                let precision = (0..count).map(|_| self.matrix()).collect::<Result<Vec<_>>>()?;
                Head::Gp(RffGpLayer::from_parts(
                    config, gp_in, w_fixed, b_fixed, projection, beta, precision,
                )?)
            }
            1 => Head::Dense(self.layer()?),
            b => return Err(Error::Checkpoint(format!("unknown head kind {b}"))),
        };
        let model = SngpModel::from_parts(network, head, sn, power_iterations, input_dim)?;
        if model.num_classes != num_classes {
            return Err(Error::Checkpoint("class count does not match head".into()));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::build_variant;
    use crate::linalg::RngState;
    use crate::model::ModelConfig;
    use crate::nn::NetworkConfig;

    fn config() -> ModelConfig {
        ModelConfig {
            network: NetworkConfig {
                input_dim: 2,
                hidden_width: 6,
                depth: 2,
                ..NetworkConfig::default()
            },
            gp: GpConfig {
                num_features: 12,
                projection_dim: Some(3),
                ..GpConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_every_variant() {
        for v in ModelVariant::ALL {
            let mut rng = RngState::new(3);
            let model = if v.is_ensemble() {
                let members = (0..3)
                    .map(|_| build_variant(v, &config(), &mut rng).unwrap())
                    .collect();
                Trained::Ensemble(EnsembleModel::new(members).unwrap())
            } else {
                let mut m = build_variant(v, &config(), &mut rng).unwrap();
                if let Some(g) = m.gp_mut() {
                    g.beta = rng.normal_matrix(2, 12, 1.0);
                }
                Trained::Single(m)
            };
            let ck = Checkpoint {
                variant: v,
                config_echo: vec![("seed".into(), "3".into()), ("variant".into(), v.tag().into())],
                model,
            };
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck, "{}", v.tag());
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = build_variant(ModelVariant::Sngp, &config(), &mut RngState::new(0)).unwrap();
        let ck = Checkpoint {
            variant: ModelVariant::Sngp,
            config_echo: Vec::new(),
            model: Trained::Single(m),
        };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
        let mut long = bytes;
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
    }
}
