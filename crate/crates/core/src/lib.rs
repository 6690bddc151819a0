//! Self-consistency training for two-stage multimodal reasoners.
//!
//! A rationale model and an answer model are trained against *voted* logits:
//! several dropout-perturbed teacher-forced passes are aggregated by a mean
//! plus variance-weighted kernel before the cross-entropy is taken. Inference
//! is a single greedy pass per stage and never sees the vote.

pub mod numerics;

/// Element type used by the model, training pipeline and checkpoints.
pub type Real = f64;
pub type Tensor = numerics::Tensor<Real>;
pub type Tape = numerics::Tape<Real>;

pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synthdata;
pub mod voting;

/// Index into the fixed vocabulary.
pub type TokenId = u32;
