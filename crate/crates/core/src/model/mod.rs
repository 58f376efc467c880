//! The translation graph: bidirectional GRU encoder, attention with visual
//! fusion, and the two decoder variants.

mod batch;
mod graph;
mod params;

use std::fmt;
use std::str::FromStr;

pub use batch::{Batch, Example};
pub use graph::{
    attention, decoder_step, encode, encode_sentence, forward_loss, init_decoder, loss_and_grads,
    loss_on_tape, visual_project, Encoded, StepOutput,
};
pub use params::{param_shapes, Bound, ModelParams, TiedProjection};

use crate::error::{Error, Result};
use crate::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    DeepGru,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::DeepGru => "deepgru",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "deepgru" => Ok(Variant::DeepGru),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected baseline or deepgru)"
            ))),
        }
    }
}

/// Layer sizes. Defaults are the full-scale sizes; [`ModelConfig::desk`]
/// gives the small profile used for tests and toy runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding size `d`; also the bottleneck size, since the output
    /// projection is tied to the target embeddings.
    pub emb_dim: usize,
    /// Encoder and decoder GRU size (`S = D`). Annotations are `2S` wide.
    pub hidden: usize,
    /// Length of the pooled image feature vector.
    pub feat_dim: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Per-gate GRU biases and biases in the attention, decoder-init and
    /// baseline bottleneck layers. Off reproduces the bias-free equations.
    pub biases: bool,
}

pub const EMB_DIM: usize = 128;
pub const HIDDEN: usize = 256;
pub const FEAT_DIM: usize = 2048;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::DeepGru,
            emb_dim: EMB_DIM,
            hidden: HIDDEN,
            feat_dim: FEAT_DIM,
            src_vocab: 5204,
            tgt_vocab: 7067,
            biases: true,
        }
    }
}

impl ModelConfig {
    /// `d=8, S=16`, 32 image features.
    pub fn desk(variant: Variant, src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            variant,
            emb_dim: 8,
            hidden: 16,
            feat_dim: 32,
            src_vocab,
            tgt_vocab,
            biases: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.emb_dim,
            self.hidden,
            self.feat_dim,
            self.src_vocab,
            self.tgt_vocab,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.src_vocab <= crate::vocab::UNK || self.tgt_vocab <= crate::vocab::UNK {
            return Err(Error::invalid("vocabularies must include the four specials"));
        }
        Ok(())
    }
}

/// Dropout on source embeddings, on annotations, and on the bottleneck(s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutRates {
    pub embeddings: f64,
    pub annotations: f64,
    pub bottleneck: f64,
}

impl Default for DropoutRates {
    fn default() -> Self {
        DropoutRates {
            embeddings: 0.3,
            annotations: 0.5,
            bottleneck: 0.5,
        }
    }
}

impl DropoutRates {
    pub const NONE: DropoutRates = DropoutRates {
        embeddings: 0.0,
        annotations: 0.0,
        bottleneck: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut Prng) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            params: ModelParams::init(&config, rng),
            config,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            params: ModelParams::zeros(&config),
            config,
        })
    }

    pub fn new(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(Model { config, params })
    }
}
