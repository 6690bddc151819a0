//! Toy multimodal encoder-decoder: p(R | T, I) for stage 1, p(Y | R, T, I) for stage 2.
//!
//! Text tokens pass through pre-norm self-attention layers, then one
//! cross-attention layer over linearly projected image cells fuses the image
//! into the text states. The decoder is a causal pre-norm stack with
//! cross-attention to that memory. Dropout is the only source of sampling
//! randomness; with `training == false` every forward pass is a pure function
//! of parameters and inputs.

mod checkpoint;
mod forward;
mod layout;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{path_stream_id, NumericsError, RngStream, Var};
use crate::synthdata::vocab::{EOS, SEP, VOCAB_SIZE};
use crate::{Real, Tape, Tensor, TokenId};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use forward::{decode, encode, greedy_decode, teacher_forced_logits, Decoded};
pub use layout::{Attention, DecoderLayer, EncoderLayer, FeedForward, Norm, Weights};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token {token} outside vocabulary of {vocab}")]
    Vocabulary { token: TokenId, vocab: usize },
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout_p: f64,
    pub max_rationale_len: usize,
    pub max_answer_len: usize,
    pub image_feature_dim: usize,
    pub image_cells: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            dropout_p: 0.1,
            max_rationale_len: 48,
            max_answer_len: 8,
            image_feature_dim: 24,
            image_cells: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.max_rationale_len,
            self.max_answer_len,
            self.image_feature_dim,
            self.image_cells,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(ModelError::Config("all counts must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(ModelError::Config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Hidden width of the feed-forward blocks.
    pub fn d_ff(&self) -> usize {
        2 * self.d_model
    }

    pub fn parameter_count(&self) -> usize {
        Weights::<()>::shapes(self).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// One multimodal question with its image features and gold rationale.
#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalExample {
    pub id: String,
    pub question_tokens: Vec<TokenId>,
    /// Row-major `image_cells × image_feature_dim` grid.
    pub image_features: Vec<f64>,
    pub choices: Vec<Vec<TokenId>>,
    pub answer_index: usize,
    pub rationale_tokens: Vec<TokenId>,
}

impl MultimodalExample {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.answer_index >= self.choices.len() {
            return Err(ModelError::Input(format!("{}: answer_index out of range", self.id)));
        }
        let all = self.question_tokens.iter().chain(&self.rationale_tokens).chain(self.choices.iter().flatten());
        for &t in all {
            if t as usize >= cfg.vocab_size {
                return Err(ModelError::Vocabulary { token: t, vocab: cfg.vocab_size });
            }
        }
        if self.rationale_tokens.len() + 1 > cfg.max_rationale_len {
            return Err(ModelError::Input(format!("{}: rationale longer than {}", self.id, cfg.max_rationale_len)));
        }
        if self.answer_target().len() > cfg.max_answer_len {
            return Err(ModelError::Input(format!("{}: answer longer than {}", self.id, cfg.max_answer_len)));
        }
        if self.image_features.len() != cfg.image_cells * cfg.image_feature_dim {
            return Err(ModelError::Input(format!("{}: image has {} values", self.id, self.image_features.len())));
        }
        Ok(())
    }

    /// Gold rationale followed by the end token.
    pub fn rationale_target(&self) -> Vec<TokenId> {
        let mut t = self.rationale_tokens.clone();
        t.push(EOS);
        t
    }

    /// Gold choice followed by the end token.
    pub fn answer_target(&self) -> Vec<TokenId> {
        let mut t = self.choices[self.answer_index].clone();
        t.push(EOS);
        t
    }

    /// Answer-stage input: question, separator, rationale.
    pub fn answer_source(&self, rationale: &[TokenId]) -> Vec<TokenId> {
        let mut t = self.question_tokens.clone();
        t.push(SEP);
        t.extend_from_slice(rationale);
        t
    }
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Deterministic initialization; each tensor draws from its own stream keyed by name.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in Weights::<()>::spec(config) {
            let n: usize = shape.iter().product();
            let data = match init {
                layout::Init::Zeros => vec![0.0; n],
                layout::Init::Ones => vec![1.0; n],
                layout::Init::Normal(std) => {
                    let mut rng = RngStream::new(seed, path_stream_id(&name_key(&name)));
                    (0..n).map(|_| std * rng.normal()).collect()
                }
            };
            tensors.insert(name, Tensor::new(shape, data)?.with_requires_grad(true));
        }
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts every tensor on `tape` (tracking gradients iff `trainable`).
    ///
    /// The returned handles follow the map's name order.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<(Weights<Var>, Vec<Var>), ModelError> {
        let order: Vec<Var> =
            self.tensors.values().map(|t| tape.leaf(t.clone().with_requires_grad(trainable))).collect();
        Ok((self.weights_from(tape, &order)?, order))
    }

    /// Assembles the layout from handles given in name order (as [`bind`](Self::bind) returns them).
    pub fn weights_from(&self, tape: &Tape, handles: &[Var]) -> Result<Weights<Var>, ModelError> {
        if handles.len() != self.tensors.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} handles for {} parameters",
                handles.len(),
                self.tensors.len()
            )));
        }
        let by_name: BTreeMap<&str, Var> =
            self.tensors.keys().map(String::as_str).zip(handles.iter().copied()).collect();
        Weights::build(&self.config, |name, shape| {
            let v = *by_name.get(name).ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            if tape.value(v).shape() != shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    tape.value(v).shape()
                )));
            }
            Ok(v)
        })
    }

    /// `θ ← θ - lr·g` with gradients listed in name order.
    pub fn sgd_step(&mut self, grads: &[Vec<Real>], lr: Real) {
        for (t, g) in self.tensors.values_mut().zip(grads) {
            t.data_mut().iter_mut().zip(g).for_each(|(p, &d)| *p -= lr * d);
        }
    }
}

fn name_key(name: &str) -> Vec<u64> {
    name.bytes().map(u64::from).collect()
}
