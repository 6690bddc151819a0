//! Test-set evaluation: accuracy, rationale quality and stochastic diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{bias_variance_decompose, jensen_gap, rouge_l, BiasVariance};
use crate::model::{encode, teacher_forced_logits, ModelParams, MultimodalExample};
use crate::numerics::{path_stream_id, RngStream};
use crate::pipeline::{infer, infer_with_rationale, sample_inference, AblationRow, PipelineError, TrainConfig};
use crate::voting::LogitStack;
use crate::Tape;

const DIAGNOSTICS: u64 = 0x4449;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test examples (from the front of the split) used for the stochastic diagnostics.
    pub diagnostic_examples: usize,
    /// Dropout-on inference runs per diagnostic example.
    pub diagnostic_samples: usize,
    /// ROUGE-L at or above which a rationale counts as good.
    pub good_rationale_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { diagnostic_examples: 16, diagnostic_samples: 32, good_rationale_threshold: 0.9 }
    }
}

/// Rationale quality × answer correctness counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Categories {
    pub good_rationale_correct: usize,
    pub good_rationale_incorrect: usize,
    pub bad_rationale_correct: usize,
    pub bad_rationale_incorrect: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    /// Two-stage accuracy with the model's own rationale.
    pub test_accuracy: f64,
    /// Answer accuracy when the gold rationale is supplied instead.
    pub gold_rationale_accuracy: f64,
    pub rouge_l: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub residual: f64,
    pub jensen_gap: f64,
    pub categories: Categories,
    #[serde(default)]
    pub per_mode: Vec<AblationRow>,
}

fn example_key(ex: &MultimodalExample) -> u64 {
    path_stream_id(&ex.id.bytes().map(u64::from).collect::<Vec<_>>())
}

/// Jensen gap of `samples` dropout passes over the gold target of the first stage present.
fn example_jensen_gap(
    ex: &MultimodalExample,
    stage1: Option<&ModelParams>,
    stage2: &ModelParams,
    samples: usize,
    seed: u64,
) -> Result<f64, PipelineError> {
    let (params, source, target) = match stage1 {
        Some(p) => (p, ex.question_tokens.clone(), ex.rationale_target()),
        None => (stage2, ex.answer_source(&[]), ex.answer_target()),
    };
    let cfg = &params.config;
    let mut tape = Tape::new();
    let (w, _) = params.bind(&mut tape, false)?;
    let mut rows = Vec::with_capacity(samples);
    for i in 0..samples {
        let mut rng = RngStream::from_path(seed, &[DIAGNOSTICS, example_key(ex), 0, i as u64]);
        let mark = tape.len();
        let memory = encode(&mut tape, &w, cfg, &source, &ex.image_features, &mut rng, true)?;
        let logits = teacher_forced_logits(&mut tape, &w, cfg, memory, &target, &mut rng, true)?;
        rows.push(tape.value(logits).data().to_vec());
        tape.truncate(mark);
    }
    let stack = LogitStack::from_samples(&rows, target.len(), cfg.vocab_size)?;
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    Ok(jensen_gap(&stack, &targets)?)
}

/// Evaluates a trained pipeline on `examples` under `cfg.ablation`'s inference path.
pub fn evaluate(
    examples: &[MultimodalExample],
    stage1: Option<&ModelParams>,
    stage2: &ModelParams,
    cfg: &TrainConfig,
    eval: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    if examples.is_empty() {
        return Err(PipelineError::Config("no evaluation examples".into()));
    }
    if eval.diagnostic_samples < 2 {
        return Err(PipelineError::Config("diagnostic_samples must be >= 2".into()));
    }
    let stage1 = stage1.filter(|_| cfg.ablation.uses_rationale());
    let n = examples.len() as f64;
    // Per-example work runs in parallel; every fold below walks results in example order.
    let outcomes: Vec<(bool, f64, bool)> = examples
        .par_iter()
        .map(|ex| {
            let out = infer(ex, stage1, stage2, cfg)?;
            let rouge = rouge_l(&out.rationale, &ex.rationale_tokens)?;
            let gold_choice = match stage1 {
                Some(_) => infer_with_rationale(ex, &ex.rationale_tokens, stage2)?.choice,
                None => out.choice,
            };
            Ok((out.choice == ex.answer_index, rouge, gold_choice == ex.answer_index))
        })
        .collect::<Result<_, PipelineError>>()?;
    let mut correct = 0usize;
    let mut gold_correct = 0usize;
    let mut rouge_sum = 0.0;
    let mut categories = Categories::default();
    for &(ok, rouge, gold_ok) in &outcomes {
        correct += usize::from(ok);
        gold_correct += usize::from(gold_ok);
        rouge_sum += rouge;
        let good = rouge >= eval.good_rationale_threshold;
        match (good, ok) {
            (true, true) => categories.good_rationale_correct += 1,
            (true, false) => categories.good_rationale_incorrect += 1,
            (false, true) => categories.bad_rationale_correct += 1,
            (false, false) => categories.bad_rationale_incorrect += 1,
        }
    }

    let diag = &examples[..eval.diagnostic_examples.min(examples.len())];
    let per_example: Vec<(BiasVariance<f64>, f64)> = diag
        .par_iter()
        .map(|ex| {
            let predictions = (0..eval.diagnostic_samples)
                .map(|i| {
                    let mut rng = RngStream::from_path(cfg.seed, &[DIAGNOSTICS, example_key(ex), 1, i as u64]);
                    Ok(sample_inference(ex, stage1, stage2, &mut rng)?.choice as f64)
                })
                .collect::<Result<Vec<_>, PipelineError>>()?;
            let bv = bias_variance_decompose(&predictions, ex.answer_index as f64)?;
            let gap = example_jensen_gap(ex, stage1, stage2, cfg.vote.n_rationale_samples.max(2), cfg.seed)?;
            Ok((bv, gap))
        })
        .collect::<Result<_, PipelineError>>()?;
    let (mut bias_sq, mut variance, mut residual, mut gap) = (0.0, 0.0, 0.0, 0.0);
    for (bv, g) in &per_example {
        bias_sq += bv.bias_sq;
        variance += bv.variance;
        residual += bv.residual;
        gap += g;
    }
    let m = diag.len().max(1) as f64;
    Ok(EvalReport {
        n_examples: examples.len(),
        test_accuracy: correct as f64 / n,
        gold_rationale_accuracy: gold_correct as f64 / n,
        rouge_l: rouge_sum / n,
        bias_sq: bias_sq / m,
        variance: variance / m,
        residual: residual / m,
        jensen_gap: gap / m,
        categories,
        per_mode: Vec::new(),
    })
}
