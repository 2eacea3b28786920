//! Tiny decoder-only transformer with per-head attention capture.
//!
//! The model is pre-norm (RMSNorm), rotary-positioned, full multi-head
//! attention with a SiLU MLP. It has no output head: the reranker only ever
//! prefills a prompt and reads attention probabilities, so nothing above the
//! last attention block needs to exist.
//!
//! Everything is generic over [`Real`] so the same code path runs in `f32`
//! (the reference precision) and in `f64` (for finite-difference checks).

mod backward;
mod checkpoint;
mod forward;
mod params;
mod rope;

use std::fmt;
use std::str::FromStr;

use ndarray::NdFloat;
use num_traits::FromPrimitive;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use backward::RowGrad;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use forward::{AttentionCapture, ForwardCache, ForwardOutput, ModelView};
pub use params::{GateParams, Init, LayerParams, Params};

/// Floating point type the model can run in.
pub trait Real: NdFloat + FromPrimitive + std::iter::Sum {}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub truncate_after_layer: Option<usize>,
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Config with `d_head = d_model / n_heads` and a 4x MLP.
    pub fn new(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model.checked_div(n_heads).unwrap_or(0),
            d_ff: 4 * d_model,
            vocab_size,
            max_seq_len,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            truncate_after_layer: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(Error::Config(format!("d_head {} must be even for rotary embeddings", self.d_head)));
        }
        if let Some(k) = self.truncate_after_layer {
            if k >= self.n_layers {
                return Err(Error::Config(format!("truncate_after_layer {k} must be < n_layers {}", self.n_layers)));
            }
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 || self.norm_eps.is_nan() || self.norm_eps <= 0.0 {
            return Err(Error::Config("rope_base must be > 1 and norm_eps > 0".into()));
        }
        Ok(())
    }

    /// Number of layers a forward pass executes under this config.
    pub fn active_layers(&self) -> usize {
        self.truncate_after_layer.map_or(self.n_layers, |k| k + 1)
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }

    pub fn check_head(&self, head: HeadId) -> Result<()> {
        if head.layer >= self.n_layers || head.head >= self.n_heads {
            return Err(invalid(format!(
                "head {head} out of bounds for {} layers x {} heads",
                self.n_layers, self.n_heads
            )));
        }
        Ok(())
    }
}

/// A `(layer, head)` pair, written `l-h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (l, h) = s.trim().split_once('-').ok_or_else(|| invalid(format!("head id {s:?} is not in l-h form")))?;
        let layer = l.parse().map_err(|_| invalid(format!("bad layer in head id {s:?}")))?;
        let head = h.parse().map_err(|_| invalid(format!("bad head in head id {s:?}")))?;
        Ok(HeadId { layer, head })
    }
}

/// A transformer: config, parameters and an optional head-selection gate.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T: Real = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub gate: Option<GateParams<T>>,
}

impl<T: Real> Transformer<T> {
    pub fn new(config: ModelConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, init);
        Ok(Transformer { config, params, gate: None })
    }

    /// View honoring `config.truncate_after_layer`.
    pub fn view(&self) -> ModelView<'_, T> {
        ModelView::new(&self.config, &self.params, self.config.active_layers())
    }

    /// View executing only layers `0..=after_layer`.
    pub fn truncate(&self, after_layer: usize) -> Result<ModelView<'_, T>> {
        if after_layer >= self.config.n_layers {
            return Err(invalid(format!(
                "truncation layer {after_layer} out of range for {} layers",
                self.config.n_layers
            )));
        }
        Ok(ModelView::new(&self.config, &self.params, after_layer + 1))
    }

    pub fn cast<U: Real>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(),
            gate: self.gate.as_ref().map(GateParams::cast),
        }
    }
}
