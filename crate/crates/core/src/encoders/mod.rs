//! Sequence encoders mapping a history of event tokens to one logit per
//! event class. Every backbone reads its representation at the position of
//! a trailing mask token and scores classes against the shared embedding
//! table.

mod convolutional;
pub(crate) mod ops;
mod params;
mod recurrent;
mod transformer;

use std::path::Path;

use candle_core::Tensor;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use params::{NamedArray, ParamStore};
use crate::event_data::{read_json, write_json};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Transformer,
    GatedRecurrent,
    TemporalConvolutional,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "gated-recurrent" | "gru" => Ok(Self::GatedRecurrent),
            "temporal-convolutional" | "tcn" => Ok(Self::TemporalConvolutional),
            other => Err(Error::Config(format!("unknown backbone {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: Backbone,
    pub num_layers: usize,
    pub num_heads: usize,
    pub embed_dim: usize,
    /// Feed-forward width for the transformer, state size for the recurrent
    /// backbone, inner channel count for the convolutional one.
    pub hidden_dim: usize,
    /// Longest token sequence, mask token included.
    pub max_len: usize,
    /// Number of event classes; padding and mask tokens are added on top.
    pub n_classes: usize,
    pub dropout: f64,
    pub kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Transformer,
            num_layers: 2,
            num_heads: 2,
            embed_dim: 64,
            hidden_dim: 256,
            max_len: 200,
            n_classes: 0,
            dropout: 0.1,
            kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 {
            return bad(format!("n_classes must be at least 2, got {}", self.n_classes));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("embed_dim, hidden_dim and num_layers must be positive".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        match self.backbone {
            Backbone::Transformer => {
                if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
                    return bad(format!(
                        "embed_dim {} is not divisible by num_heads {}",
                        self.embed_dim, self.num_heads
                    ));
                }
            }
            Backbone::TemporalConvolutional => {
                if self.kernel_size == 0 {
                    return bad("kernel_size must be positive".into());
                }
            }
            Backbone::GatedRecurrent => {}
        }
        Ok(())
    }

    pub fn pad_id(&self) -> u32 {
        self.n_classes as u32
    }

    pub fn mask_id(&self) -> u32 {
        self.n_classes as u32 + 1
    }

    pub fn token_count(&self) -> usize {
        self.n_classes + 2
    }
}

/// Right-padded token batch with a mask token after each history.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    /// Index of the mask token in each row.
    pub predict_pos: Vec<usize>,
    pub pad_id: u32,
}

impl SequenceBatch {
    /// Keeps the most recent `max_len - 1` events of each history.
    pub fn from_histories<H: AsRef<[u32]>>(histories: &[H], cfg: &EncoderConfig) -> Result<Self> {
        Self::padded_to(histories, cfg, 0)
    }

    /// Like [`Self::from_histories`] but pads every row to at least `min_len`.
    pub fn padded_to<H: AsRef<[u32]>>(
        histories: &[H],
        cfg: &EncoderConfig,
        min_len: usize,
    ) -> Result<Self> {
        if histories.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let keep = cfg.max_len - 1;
        let trimmed: Vec<&[u32]> = histories
            .iter()
            .map(|h| {
                let h = h.as_ref();
                &h[h.len().saturating_sub(keep)..]
            })
            .collect();
        let longest = trimmed.iter().map(|h| h.len() + 1).max().unwrap_or(1);
        let seq_len = longest.max(min_len).min(cfg.max_len);
        let mut ids = vec![cfg.pad_id(); trimmed.len() * seq_len];
        let mut predict_pos = Vec::with_capacity(trimmed.len());
        for (row, h) in trimmed.iter().enumerate() {
            if let Some(&bad) = h.iter().find(|&&t| t as usize >= cfg.n_classes) {
                return Err(Error::Index {
                    index: bad as usize,
                    len: cfg.n_classes,
                });
            }
            let base = row * seq_len;
            ids[base..base + h.len()].copy_from_slice(h);
            ids[base + h.len()] = cfg.mask_id();
            predict_pos.push(h.len());
        }
        Ok(Self {
            ids,
            batch: trimmed.len(),
            seq_len,
            predict_pos,
            pad_id: cfg.pad_id(),
        })
    }

    pub(crate) fn ids_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.ids.clone(), self.batch * self.seq_len, &ops::device())?)
    }

    /// Additive key bias `[batch, 1, 1, seq]`: zero for real tokens, a large
    /// negative value for padding.
    pub(crate) fn key_bias(&self) -> Result<Tensor> {
        let bias: Vec<f64> = self
            .ids
            .iter()
            .map(|&t| if t == self.pad_id { ops::ATTENTION_MASK_BIAS } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(bias, (self.batch, 1, 1, self.seq_len), &ops::device())?)
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn rand::RngCore),
}

impl Mode<'_> {
    pub(crate) fn dropout(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self {
            Mode::Eval => Ok(x.clone()),
            Mode::Train(rng) => ops::dropout(x, rate, &mut **rng),
        }
    }
}

/// One peer network.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    params: ParamStore,
}

pub const CHECKPOINT_FORMAT: &str = "eventdistill-peer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeerCheckpoint {
    pub format: String,
    pub version: u32,
    pub config: EncoderConfig,
    pub params: Vec<NamedArray>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let specs = match config.backbone {
            Backbone::Transformer => transformer::specs(&config),
            Backbone::GatedRecurrent => recurrent::specs(&config),
            Backbone::TemporalConvolutional => convolutional::specs(&config),
        };
        let params = ParamStore::init(&specs, rng)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Class logits `[batch, n_classes]`.
    pub fn forward(&self, batch: &SequenceBatch, mode: &mut Mode<'_>) -> Result<Tensor> {
        if batch.pad_id != self.config.pad_id() {
            return Err(Error::Shape("batch was built for a different vocabulary".into()));
        }
        if batch.seq_len > self.config.max_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds max_len {}",
                batch.seq_len, self.config.max_len
            )));
        }
        let hidden = match self.config.backbone {
            Backbone::Transformer => transformer::forward(&self.config, &self.params, batch, mode)?,
            Backbone::GatedRecurrent => recurrent::forward(&self.config, &self.params, batch, mode)?,
            Backbone::TemporalConvolutional => {
                convolutional::forward(&self.config, &self.params, batch, mode)?
            }
        };
        self.score(&hidden)
    }

    fn score(&self, hidden: &Tensor) -> Result<Tensor> {
        let table = self.params.get("embed.token")?.narrow(0, 0, self.config.n_classes)?;
        let bias = self.params.get("output.bias")?;
        Ok(hidden.matmul(&table.t()?)?.broadcast_add(bias)?)
    }

    /// Evaluation-mode logits as an array.
    pub fn logits(&self, batch: &SequenceBatch) -> Result<Array2<f64>> {
        let t = self.forward(batch, &mut Mode::Eval)?;
        tensor_to_array(&t)
    }

    pub fn checkpoint(&self) -> Result<PeerCheckpoint> {
        Ok(PeerCheckpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.to_arrays()?,
        })
    }

    pub fn from_checkpoint(ckpt: &PeerCheckpoint) -> Result<Self> {
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let enc = Self::new(ckpt.config.clone(), &mut rng)?;
        enc.params.load_arrays(&ckpt.params)?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.checkpoint()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: PeerCheckpoint = read_json(path)?;
        Self::from_checkpoint(&ckpt)
    }

    pub fn duplicate(&self) -> Result<Self> {
        let params = self.params.duplicate()?;
        params.check_dtype()?;
        Ok(Self {
            config: self.config.clone(),
            params,
        })
    }
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let data = t.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((r, c), data).map_err(|e| Error::Shape(e.to_string()))
}

pub fn array_to_tensor(a: &Array2<f64>) -> Result<Tensor> {
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, a.dim(), &ops::device())?)
}
