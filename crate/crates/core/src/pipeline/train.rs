//! Stage training: N dropout passes per example, voted cross-entropy, plain SGD.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::{AblationMode, PipelineError, RationaleSource, Stage, TrainConfig};
use crate::model::{
    encode, greedy_decode, teacher_forced_logits, ModelConfig, ModelParams, MultimodalExample, Weights,
};
use crate::numerics::{path_stream_id, RngStream, Var};
use crate::synthdata::vocab::EOS;
use crate::voting::{voted_loss_on_tape, VoteConfig};
use crate::{Real, Tape, TokenId};

const SHUFFLE: u64 = 0x5348;

/// One (source, target) training pair for either stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageExample {
    pub id: String,
    pub source: Vec<TokenId>,
    pub image: Vec<Real>,
    pub target: Vec<TokenId>,
}

/// Training objective for a stage.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    /// `samples` dropout passes combined by the vote.
    Voted { vote: VoteConfig, samples: usize },
    /// Single dropout pass, cross-entropy straight on its logits.
    PlainCrossEntropy,
}

impl Objective {
    /// Vote with the pass count `stage` takes from `vote`.
    pub fn voted(vote: VoteConfig, stage: Stage) -> Self {
        let samples = stage.samples(&vote);
        Objective::Voted { vote, samples }
    }

    pub fn samples(&self) -> usize {
        match self {
            Objective::Voted { samples, .. } => *samples,
            Objective::PlainCrossEntropy => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossPoint {
    pub stage: u8,
    pub epoch: usize,
    pub batch: usize,
    pub loss: Real,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub params: ModelParams,
    pub curve: Vec<LossPoint>,
}

impl Trained {
    /// Mean batch loss over the last epoch.
    pub fn final_loss(&self) -> Option<Real> {
        let last = self.curve.last()?.epoch;
        let tail: Vec<Real> = self.curve.iter().filter(|p| p.epoch == last).map(|p| p.loss).collect();
        Some(tail.iter().sum::<Real>() / tail.len() as Real)
    }
}

/// Voted (or plain) loss of one example; pass `i` draws its dropout masks from `stream(i)`.
pub fn example_loss(
    tape: &mut Tape,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    ex: &StageExample,
    objective: &Objective,
    stream: impl Fn(usize) -> RngStream,
) -> Result<Var, PipelineError> {
    let samples = objective.samples();
    let targets: Vec<usize> = ex.target.iter().map(|&t| t as usize).collect();
    let mut passes = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut rng = stream(i);
        let memory = encode(tape, w, cfg, &ex.source, &ex.image, &mut rng, true)?;
        passes.push(teacher_forced_logits(tape, w, cfg, memory, &ex.target, &mut rng, true)?);
    }
    Ok(match objective {
        Objective::Voted { vote, .. } => voted_loss_on_tape(tape, &passes, &targets, None, vote)?,
        Objective::PlainCrossEntropy => tape.cross_entropy(passes[0], &targets, None)?,
    })
}

fn example_gradient(
    params: &ModelParams,
    ex: &StageExample,
    objective: &Objective,
    stream: impl Fn(usize) -> RngStream,
) -> Result<(Real, Vec<Vec<Real>>), PipelineError> {
    let mut tape = Tape::new();
    let (w, order) = params.bind(&mut tape, true)?;
    let loss = example_loss(&mut tape, &w, &params.config, ex, objective, stream)?;
    tape.backward(loss)?;
    let grads = order
        .iter()
        .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).numel()], <[Real]>::to_vec))
        .collect();
    Ok((tape.value(loss).item()?, grads))
}

/// Trains one stage from its seed-derived initialization.
pub fn train_stage(
    stage: Stage,
    examples: &[StageExample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    objective: &Objective,
) -> Result<Trained, PipelineError> {
    train_stage_observed(stage, examples, model, cfg, objective, |_, _| {})
}

/// [`train_stage`], calling `on_epoch(epoch, params)` after every epoch.
pub fn train_stage_observed(
    stage: Stage,
    examples: &[StageExample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    objective: &Objective,
    mut on_epoch: impl FnMut(usize, &ModelParams),
) -> Result<Trained, PipelineError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(PipelineError::Config("no training examples".into()));
    }
    if let Objective::Voted { vote, samples } = objective {
        vote.validate()?;
        if *samples == 0 {
            return Err(PipelineError::Config("at least one pass per example".into()));
        }
    }
    let tag = u64::from(stage.id());
    let mut params = ModelParams::init(model, path_stream_id(&[cfg.seed, tag]))?;
    let mut curve = Vec::new();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut RngStream::from_path(cfg.seed, &[tag, epoch as u64, SHUFFLE]));
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            // Per-example gradients in parallel, summed in batch order so results do not depend on threading.
            let results: Vec<(Real, Vec<Vec<Real>>)> = idx
                .par_iter()
                .enumerate()
                .map(|(k, &e)| {
                    let path = [tag, epoch as u64, batch as u64, k as u64];
                    let stream =
                        |i: usize| RngStream::from_path(cfg.seed, &[path[0], path[1], path[2], path[3], i as u64]);
                    example_gradient(&params, &examples[e], objective, stream)
                })
                .collect::<Result<_, _>>()?;
            let mut total = 0.0;
            let mut acc: Option<Vec<Vec<Real>>> = None;
            for (loss, grads) in results {
                total += loss;
                match &mut acc {
                    None => acc = Some(grads),
                    Some(a) => {
                        a.iter_mut().zip(&grads).for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(x, y)| *x += y))
                    }
                }
            }
            let n = idx.len() as Real;
            let loss = total / n;
            if !loss.is_finite() {
                let ids: Vec<&str> = idx.iter().map(|&e| examples[e].id.as_str()).collect();
                return Err(PipelineError::NonFinite { stage: stage.id(), epoch, batch, examples: ids.join(",") });
            }
            let mut grads = acc.expect("batches are non-empty");
            grads.iter_mut().flatten().for_each(|g| *g /= n);
            params.sgd_step(&grads, cfg.learning_rate);
            curve.push(LossPoint { stage: stage.id(), epoch, batch, loss });
        }
        on_epoch(epoch, &params);
    }
    Ok(Trained { params, curve })
}

/// Rationale-stage training pairs: question + image → rationale.
pub fn stage1_examples(data: &[MultimodalExample]) -> Vec<StageExample> {
    data.iter()
        .map(|e| StageExample {
            id: e.id.clone(),
            source: e.question_tokens.clone(),
            image: e.image_features.clone(),
            target: e.rationale_target(),
        })
        .collect()
}

/// Rationale model: question + image → rationale.
pub fn train_stage1(
    data: &[MultimodalExample],
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Trained, PipelineError> {
    let vote = cfg.ablation.training_vote(&cfg.vote, Stage::Rationale);
    train_stage(Stage::Rationale, &stage1_examples(data), model, cfg, &Objective::voted(vote, Stage::Rationale))
}

/// Answer-stage training pairs: question ‖ separator ‖ rationale → gold choice.
pub fn stage2_sources(
    data: &[MultimodalExample],
    cfg: &TrainConfig,
    stage1: Option<&ModelParams>,
) -> Result<Vec<StageExample>, PipelineError> {
    data.iter()
        .map(|e| {
            let rationale = if cfg.ablation == AblationMode::NoRationale {
                Vec::new()
            } else {
                match cfg.stage2_rationale_source {
                    RationaleSource::Gold => e.rationale_tokens.clone(),
                    RationaleSource::VotedPredicted => {
                        let p = stage1
                            .ok_or_else(|| PipelineError::Config("voted_predicted needs stage-1 params".into()))?;
                        predict_rationale(p, e)?
                    }
                }
            };
            Ok(StageExample {
                id: e.id.clone(),
                source: e.answer_source(&rationale),
                image: e.image_features.clone(),
                target: e.answer_target(),
            })
        })
        .collect()
}

/// Eval-mode rationale decode. Every dropout-free pass is identical, so the vote over them is the greedy decode.
fn predict_rationale(params: &ModelParams, e: &MultimodalExample) -> Result<Vec<TokenId>, PipelineError> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let (w, _) = params.bind(&mut tape, false)?;
    let memory = encode(&mut tape, &w, cfg, &e.question_tokens, &e.image_features, &mut RngStream::new(0, 0), false)?;
    Ok(greedy_decode(&mut tape, &w, cfg, memory, cfg.max_rationale_len, EOS)?)
}

/// Answer model: question, rationale and image → answer tokens.
pub fn train_stage2(
    data: &[MultimodalExample],
    model: &ModelConfig,
    cfg: &TrainConfig,
    stage1: Option<&ModelParams>,
) -> Result<Trained, PipelineError> {
    let examples = stage2_sources(data, cfg, stage1)?;
    let vote = cfg.ablation.training_vote(&cfg.vote, Stage::Answer);
    train_stage(Stage::Answer, &examples, model, cfg, &Objective::voted(vote, Stage::Answer))
}
