//! Two-stage training with voted losses, single-pass inference and the ablation grid.

mod ablation;
mod gradcheck;
mod infer;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::metrics::MetricError;
use crate::model::ModelError;
use crate::numerics::NumericsError;
use crate::synthdata::DataError;
use crate::voting::{VoteConfig, VotingError};

pub use ablation::{run_ablation, summarize, AblationRow, AblationSummary, METRICS_HEADER};
pub use gradcheck::{end_to_end_gradcheck, toy_model};
pub use infer::{infer, infer_with_rationale, sample_inference, Inference};
pub use train::{
    example_loss, stage1_examples, stage2_sources, train_stage, train_stage1, train_stage2, train_stage_observed,
    LossPoint, Objective, StageExample, Trained,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss in stage {stage}, epoch {epoch}, batch {batch} (examples: {examples})")]
    NonFinite { stage: u8, epoch: usize, batch: usize, examples: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Voting(#[from] VotingError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which rationale the answer stage is trained on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleSource {
    #[default]
    Gold,
    /// Eval-mode decode of the trained rationale model.
    VotedPredicted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    MeanOnly,
    WeightedOnly,
    NoVoteRationale,
    NoVoteAnswer,
    InferenceVoting,
    NoRationale,
}

impl AblationMode {
    pub const ALL: [AblationMode; 7] = [
        AblationMode::Full,
        AblationMode::MeanOnly,
        AblationMode::WeightedOnly,
        AblationMode::NoVoteRationale,
        AblationMode::NoVoteAnswer,
        AblationMode::InferenceVoting,
        AblationMode::NoRationale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::MeanOnly => "mean_only",
            AblationMode::WeightedOnly => "weighted_only",
            AblationMode::NoVoteRationale => "no_vote_rationale",
            AblationMode::NoVoteAnswer => "no_vote_answer",
            AblationMode::InferenceVoting => "inference_voting",
            AblationMode::NoRationale => "no_rationale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Whether a rationale model is trained and its output fed to the answer stage.
    pub fn uses_rationale(self) -> bool {
        self != AblationMode::NoRationale
    }

    /// Vote settings actually used when training `stage`.
    pub fn training_vote(self, base: &VoteConfig, stage: Stage) -> VoteConfig {
        let mut v = base.clone();
        match (self, stage) {
            (AblationMode::MeanOnly, _) => v.alpha = 1.0,
            (AblationMode::WeightedOnly, _) => v.alpha = 0.0,
            (AblationMode::NoVoteRationale | AblationMode::InferenceVoting, Stage::Rationale) => {
                v.n_rationale_samples = 1
            }
            (AblationMode::NoVoteAnswer | AblationMode::InferenceVoting, Stage::Answer) => v.n_answer_samples = 1,
            _ => {}
        }
        let n = match stage {
            Stage::Rationale => v.n_rationale_samples,
            Stage::Answer => v.n_answer_samples,
        };
        // With a single pass the vote is the identity; normalize so equal trainings share a key.
        if n == 1 {
            v = VoteConfig { n_rationale_samples: 1, n_answer_samples: 1, ..VoteConfig::default() };
        }
        v
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rationale,
    Answer,
}

impl Stage {
    pub fn id(self) -> u8 {
        match self {
            Stage::Rationale => 1,
            Stage::Answer => 2,
        }
    }

    pub fn samples(self, vote: &VoteConfig) -> usize {
        match self {
            Stage::Rationale => vote.n_rationale_samples,
            Stage::Answer => vote.n_answer_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub vote: VoteConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stage2_rationale_source: RationaleSource,
    pub ablation: AblationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            vote: VoteConfig::default(),
            learning_rate: 0.05,
            batch_size: 16,
            epochs: 6,
            seed: 0,
            stage2_rationale_source: RationaleSource::Gold,
            ablation: AblationMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.vote.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PipelineError::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
