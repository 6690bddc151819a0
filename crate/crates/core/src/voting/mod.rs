//! Logit voting: mean plus variance-weighted aggregation of dropout samples.
//!
//! For every sequence position the N sampled logit vectors are reduced to
//!
//! ```text
//! mean     = (1/N) Σᵢ Lⁱ
//! std      = sample standard deviation across i (divisor N-1 or N)
//! weights  = 1 / (1 + std)
//! weighted = weights ⊙ S / Σ_v weights,  S = Σᵢ Lⁱ (summed) or mean (averaged)
//! final    = α·mean + (1-α)·weighted
//! ```
//!
//! All reductions run per position over the vocabulary axis. A single sample
//! bypasses the vote and is returned unchanged.

mod graph;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::metrics::rouge_l;
use crate::numerics::{kernels::argmax, softmax_cross_entropy, NumericsError, Scalar};
use crate::TokenId;

pub use graph::{vote_on_tape, voted_loss_on_tape};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VotingError {
    #[error("invalid vote input: {0}")]
    Input(String),
    #[error("non-finite logit at sample {sample}, position {position}, entry {entry}")]
    NonFinite { sample: usize, position: usize, entry: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// What the variance-weighted branch scales by the weights before normalizing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightedVariant {
    /// `weights ⊙ Σᵢ Lⁱ / Σ_v weights` (the reference implementation's form).
    #[default]
    Summed,
    /// Same with an extra `1/N`, i.e. `weights ⊙ mean / Σ_v weights`.
    Averaged,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdMode {
    /// Divisor N-1.
    #[default]
    Unbiased,
    /// Divisor N.
    Population,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleDecode {
    /// Argmax of the voted logits.
    #[default]
    LogitArgmax,
    /// Most frequent per-sample argmax; ties go to the lowest token id.
    TokenMajority,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteConfig {
    pub n_rationale_samples: usize,
    pub n_answer_samples: usize,
    pub alpha: f64,
    pub variant: WeightedVariant,
    pub std_mode: StdMode,
    pub rationale_decode: RationaleDecode,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self {
            n_rationale_samples: 4,
            n_answer_samples: 4,
            alpha: 0.5,
            variant: WeightedVariant::Summed,
            std_mode: StdMode::Unbiased,
            rationale_decode: RationaleDecode::LogitArgmax,
        }
    }
}

impl VoteConfig {
    pub fn validate(&self) -> Result<(), VotingError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(VotingError::Input(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n_rationale_samples == 0 || self.n_answer_samples == 0 {
            return Err(VotingError::Input("sample counts must be >= 1".into()));
        }
        Ok(())
    }
}

/// N × L × V logits from N passes over the same aligned target.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitStack<T> {
    samples: usize,
    positions: usize,
    vocab: usize,
    data: Vec<T>,
    mask: Vec<bool>,
}

impl<T: Scalar> LogitStack<T> {
    /// `data` is sample-major: sample i, position j, entry v at `(i*L + j)*V + v`.
    pub fn new(samples: usize, positions: usize, vocab: usize, data: Vec<T>) -> Result<Self, VotingError> {
        if samples == 0 || positions == 0 || vocab == 0 {
            return Err(VotingError::Input(format!("empty stack {samples}×{positions}×{vocab}")));
        }
        if data.len() != samples * positions * vocab {
            return Err(VotingError::Input(format!(
                "stack {samples}×{positions}×{vocab} needs {} values, got {}",
                samples * positions * vocab,
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            let (sample, rest) = (k / (positions * vocab), k % (positions * vocab));
            return Err(VotingError::NonFinite { sample, position: rest / vocab, entry: rest % vocab });
        }
        Ok(Self { samples, positions, vocab, data, mask: vec![true; positions] })
    }

    /// Stacks per-sample `L×V` matrices given as flat row-major buffers.
    pub fn from_samples(samples: &[Vec<T>], positions: usize, vocab: usize) -> Result<Self, VotingError> {
        if samples.iter().any(|s| s.len() != positions * vocab) {
            return Err(VotingError::Input("samples disagree on L×V".into()));
        }
        Self::new(samples.len(), positions, vocab, samples.concat())
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self, VotingError> {
        if mask.len() != self.positions {
            return Err(VotingError::Input(format!("mask length {} != L {}", mask.len(), self.positions)));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let n = self.positions * self.vocab;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn logits(&self, i: usize, j: usize) -> &[T] {
        let off = (i * self.positions + j) * self.vocab;
        &self.data[off..off + self.vocab]
    }
}

/// Per-position aggregates, each stored row-major as L × V.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VotedLogits<T> {
    pub positions: usize,
    pub vocab: usize,
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub weights: Vec<T>,
    pub weighted: Vec<T>,
    #[serde(rename = "final")]
    pub final_logits: Vec<T>,
}

impl<T: Scalar> VotedLogits<T> {
    pub fn final_row(&self, j: usize) -> &[T] {
        &self.final_logits[j * self.vocab..(j + 1) * self.vocab]
    }
}

pub fn vote_logits<T: Scalar>(stack: &LogitStack<T>, cfg: &VoteConfig) -> Result<VotedLogits<T>, VotingError> {
    cfg.validate()?;
    let (n, l, v) = (stack.samples, stack.positions, stack.vocab);
    let len = l * v;
    if n == 1 {
        let only = stack.sample(0).to_vec();
        return Ok(VotedLogits {
            positions: l,
            vocab: v,
            mean: only.clone(),
            std: vec![T::zero(); len],
            weights: vec![T::one(); len],
            weighted: only.clone(),
            final_logits: only,
        });
    }
    let count = T::from_usize_lossy(n);
    let mut sum = stack.sample(0).to_vec();
    for i in 1..n {
        sum.iter_mut().zip(stack.sample(i)).for_each(|(s, &x)| *s += x);
    }
    let mean: Vec<T> = sum.iter().map(|&s| s / count).collect();
    let mut sq = vec![T::zero(); len];
    for i in 0..n {
        sq.iter_mut().zip(stack.sample(i)).zip(&mean).for_each(|((acc, &x), &m)| {
            let d = x - m;
            *acc += d * d;
        });
    }
    let divisor = match cfg.std_mode {
        StdMode::Unbiased => T::from_usize_lossy(n - 1),
        StdMode::Population => count,
    };
    let std: Vec<T> = sq.iter().map(|&s| (s / divisor).sqrt()).collect();
    let weights: Vec<T> = std.iter().map(|&s| (s + T::one()).recip()).collect();
    let base = match cfg.variant {
        WeightedVariant::Summed => &sum,
        WeightedVariant::Averaged => &mean,
    };
    let mut weighted = vec![T::zero(); len];
    for j in 0..l {
        let r = j * v..(j + 1) * v;
        let norm: T = weights[r.clone()].iter().copied().sum();
        for k in r {
            weighted[k] = weights[k] * base[k] / norm;
        }
    }
    let alpha = T::lit(cfg.alpha);
    let beta = T::one() - alpha;
    let final_logits = mean.iter().zip(&weighted).map(|(&m, &w)| alpha * m + beta * w).collect();
    Ok(VotedLogits { positions: l, vocab: v, mean, std, weights, weighted, final_logits })
}

/// Mean cross-entropy of the voted logits over the valid positions.
pub fn voted_loss<T: Scalar>(stack: &LogitStack<T>, targets: &[usize], cfg: &VoteConfig) -> Result<T, VotingError> {
    if targets.len() != stack.positions {
        return Err(VotingError::Input(format!("{} targets for {} positions", targets.len(), stack.positions)));
    }
    let voted = vote_logits(stack, cfg)?;
    let mut total = T::zero();
    let mut valid = 0usize;
    for (j, &t) in targets.iter().enumerate() {
        if stack.mask[j] {
            total += softmax_cross_entropy(voted.final_row(j), t)?;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(VotingError::Input("no valid positions".into()));
    }
    Ok(total / T::from_usize_lossy(valid))
}

/// Voted token sequence, cut at the first `end_token` (which is dropped).
pub fn decode_rationale<T: Scalar>(
    voted: &VotedLogits<T>,
    stack: &LogitStack<T>,
    cfg: &VoteConfig,
    end_token: TokenId,
) -> Vec<TokenId> {
    let mut out = Vec::new();
    for j in 0..voted.positions {
        if !stack.mask[j] {
            continue;
        }
        let tok = match cfg.rationale_decode {
            RationaleDecode::LogitArgmax => argmax(voted.final_row(j)),
            RationaleDecode::TokenMajority => {
                majority((0..stack.samples).map(|i| argmax(stack.logits(i, j))), stack.vocab)
            }
        } as TokenId;
        if tok == end_token {
            break;
        }
        out.push(tok);
    }
    out
}

/// Most frequent value; ties resolve to the smallest.
pub fn majority(values: impl IntoIterator<Item = usize>, bound: usize) -> usize {
    let mut counts = vec![0usize; bound];
    for v in values {
        counts[v] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

/// Maps a decoded answer to a choice: exact match first, else highest ROUGE-L (lowest index on ties).
pub fn match_choice(decoded: &[TokenId], choices: &[Vec<TokenId>]) -> Result<usize, VotingError> {
    if choices.is_empty() {
        return Err(VotingError::Input("no choices".into()));
    }
    if let Some(i) = choices.iter().position(|c| c.as_slice() == decoded) {
        return Ok(i);
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in choices.iter().enumerate() {
        let score =
            if c.is_empty() { 0.0 } else { rouge_l(decoded, c).map_err(|e| VotingError::Input(e.to_string()))? };
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}

/// Votes over answer-position logits and maps the decoded answer to a choice index.
pub fn vote_answer<T: Scalar>(
    stack: &LogitStack<T>,
    cfg: &VoteConfig,
    choices: &[Vec<TokenId>],
    end_token: TokenId,
) -> Result<usize, VotingError> {
    if choices.is_empty() {
        return Err(VotingError::Input("no choices".into()));
    }
    let voted = vote_logits(stack, cfg)?;
    let decoded = decode_rationale(&voted, stack, cfg, end_token);
    match_choice(&decoded, choices)
}
