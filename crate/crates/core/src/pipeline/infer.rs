//! Inference: one greedy pass per stage by default; voting over noisy decodes only in the
//! `inference_voting` ablation.

use super::{AblationMode, PipelineError, TrainConfig};
use crate::model::{decode, encode, Decoded, ModelParams, MultimodalExample};
use crate::numerics::{path_stream_id, RngStream};
use crate::synthdata::vocab::EOS;
use crate::voting::{decode_rationale, match_choice, vote_answer, vote_logits, LogitStack};
use crate::{Tape, TokenId};

const INFER: u64 = 0x494e;

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub rationale: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub choice: usize,
}

/// Encode + free decode; dropout everywhere iff `noise` is given.
fn run(
    params: &ModelParams,
    source: &[TokenId],
    image: &[f64],
    max_len: usize,
    noise: Option<&mut RngStream>,
) -> Result<Decoded, PipelineError> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let (w, _) = params.bind(&mut tape, false)?;
    let training = noise.is_some();
    let mut spare = RngStream::new(0, 0);
    let rng = noise.unwrap_or(&mut spare);
    let memory = encode(&mut tape, &w, cfg, source, image, rng, training)?;
    let noise = if training { Some(rng) } else { None };
    Ok(decode(&mut tape, &w, cfg, memory, max_len, EOS, noise)?)
}

/// Stacks per-step logits of several decodes over their common prefix.
fn common_prefix_stack(decodes: &[Decoded], vocab: usize) -> Result<LogitStack<f64>, PipelineError> {
    let len = decodes.iter().map(|d| d.step_logits.len()).min().unwrap_or(0);
    let samples: Vec<Vec<f64>> = decodes.iter().map(|d| d.step_logits[..len].concat()).collect();
    Ok(LogitStack::from_samples(&samples, len, vocab)?)
}

fn example_key(ex: &MultimodalExample) -> u64 {
    path_stream_id(&ex.id.bytes().map(u64::from).collect::<Vec<_>>())
}

/// Answer stage given a fixed rationale (deterministic greedy).
pub fn infer_with_rationale(
    ex: &MultimodalExample,
    rationale: &[TokenId],
    stage2: &ModelParams,
) -> Result<Inference, PipelineError> {
    let out = run(stage2, &ex.answer_source(rationale), &ex.image_features, stage2.config.max_answer_len, None)?;
    let choice = match_choice(&out.tokens, &ex.choices)?;
    Ok(Inference { rationale: rationale.to_vec(), answer: out.tokens, choice })
}

/// Full two-stage inference.
///
/// The default path never reads `cfg.vote`: a single greedy decode per stage.
pub fn infer(
    ex: &MultimodalExample,
    stage1: Option<&ModelParams>,
    stage2: &ModelParams,
    cfg: &TrainConfig,
) -> Result<Inference, PipelineError> {
    let stage1 = stage1.filter(|_| cfg.ablation.uses_rationale());
    if cfg.ablation != AblationMode::InferenceVoting {
        let rationale = match stage1 {
            Some(p) => run(p, &ex.question_tokens, &ex.image_features, p.config.max_rationale_len, None)?.tokens,
            None => Vec::new(),
        };
        return infer_with_rationale(ex, &rationale, stage2);
    }

    let key = example_key(ex);
    let stream = |stage: u64, i: usize| RngStream::from_path(cfg.seed, &[INFER, key, stage, i as u64]);
    let rationale = match stage1 {
        Some(p) => {
            let decodes = (0..cfg.vote.n_rationale_samples)
                .map(|i| {
                    run(p, &ex.question_tokens, &ex.image_features, p.config.max_rationale_len, Some(&mut stream(1, i)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let stack = common_prefix_stack(&decodes, p.config.vocab_size)?;
            let voted = vote_logits(&stack, &cfg.vote)?;
            decode_rationale(&voted, &stack, &cfg.vote, EOS)
        }
        None => Vec::new(),
    };
    let source = ex.answer_source(&rationale);
    let decodes = (0..cfg.vote.n_answer_samples)
        .map(|i| run(stage2, &source, &ex.image_features, stage2.config.max_answer_len, Some(&mut stream(2, i))))
        .collect::<Result<Vec<_>, _>>()?;
    let stack = common_prefix_stack(&decodes, stage2.config.vocab_size)?;
    let choice = vote_answer(&stack, &cfg.vote, &ex.choices, EOS)?;
    let voted = vote_logits(&stack, &cfg.vote)?;
    let answer = decode_rationale(&voted, &stack, &cfg.vote, EOS);
    Ok(Inference { rationale, answer, choice })
}

/// One stochastic (dropout-on) pass through both stages; used for variance diagnostics.
pub fn sample_inference(
    ex: &MultimodalExample,
    stage1: Option<&ModelParams>,
    stage2: &ModelParams,
    rng: &mut RngStream,
) -> Result<Inference, PipelineError> {
    let rationale = match stage1 {
        Some(p) => run(p, &ex.question_tokens, &ex.image_features, p.config.max_rationale_len, Some(rng))?.tokens,
        None => Vec::new(),
    };
    let out = run(stage2, &ex.answer_source(&rationale), &ex.image_features, stage2.config.max_answer_len, Some(rng))?;
    let choice = match_choice(&out.tokens, &ex.choices)?;
    Ok(Inference { rationale, answer: out.tokens, choice })
}
