//! Ablation grid: train + evaluate every (mode, seed), reusing identical stage trainings.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train_stage1, train_stage2, AblationMode, PipelineError, RationaleSource, Stage, TrainConfig, Trained};
use crate::eval::{evaluate, EvalConfig};
use crate::model::ModelConfig;
use crate::synthdata::{generate_dataset, DatasetSpec};

pub const METRICS_HEADER: &str = "mode,seed,test_accuracy,rouge_l,bias_sq,variance,residual,jensen_gap";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub seed: u64,
    pub test_accuracy: f64,
    pub rouge_l: f64,
    pub bias_sq: f64,
    pub variance: f64,
    pub residual: f64,
    pub jensen_gap: f64,
    pub gold_rationale_accuracy: f64,
}

impl AblationRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode,
            self.seed,
            self.test_accuracy,
            self.rouge_l,
            self.bias_sq,
            self.variance,
            self.residual,
            self.jensen_gap
        )
    }

    pub fn to_csv(rows: &[AblationRow]) -> String {
        let mut out = format!("{METRICS_HEADER}\n");
        for r in rows {
            let _ = writeln!(out, "{}", r.csv_line());
        }
        out
    }
}

/// Per-mode mean and sample standard deviation over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub mode: AblationMode,
    pub n_seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub rouge_l_mean: f64,
    pub rouge_l_std: f64,
    pub gold_rationale_accuracy_mean: f64,
}

impl AblationSummary {
    pub const HEADER: &'static str =
        "mode,n_seeds,accuracy_mean,accuracy_std,rouge_l_mean,rouge_l_std,gold_rationale_accuracy_mean";

    pub fn to_csv(rows: &[AblationSummary]) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.mode,
                r.n_seeds,
                r.accuracy_mean,
                r.accuracy_std,
                r.rouge_l_mean,
                r.rouge_l_std,
                r.gold_rationale_accuracy_mean
            );
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (mean, std)
}

/// Groups rows by mode, in first-appearance order.
pub fn summarize(rows: &[AblationRow]) -> Vec<AblationSummary> {
    let mut modes: Vec<AblationMode> = Vec::new();
    for r in rows {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|mode| {
            let of: Vec<&AblationRow> = rows.iter().filter(|r| r.mode == mode).collect();
            let acc: Vec<f64> = of.iter().map(|r| r.test_accuracy).collect();
            let rouge: Vec<f64> = of.iter().map(|r| r.rouge_l).collect();
            let gold: Vec<f64> = of.iter().map(|r| r.gold_rationale_accuracy).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let (rouge_l_mean, rouge_l_std) = mean_std(&rouge);
            AblationSummary {
                mode,
                n_seeds: of.len(),
                accuracy_mean,
                accuracy_std,
                rouge_l_mean,
                rouge_l_std,
                gold_rationale_accuracy_mean: mean_std(&gold).0,
            }
        })
        .collect()
}

/// Everything that determines a stage's trained parameters within one grid run.
#[derive(Serialize)]
struct StageKey<'a> {
    stage: Stage,
    seed: u64,
    vote: crate::voting::VoteConfig,
    uses_rationale: bool,
    source: RationaleSource,
    upstream: Option<&'a str>,
}

/// Runs every mode for seeds `base.seed .. base.seed + n_seeds`; `progress` gets one line per finished run.
pub fn run_ablation(
    spec: &DatasetSpec,
    model: &ModelConfig,
    base: &TrainConfig,
    eval: &EvalConfig,
    modes: &[AblationMode],
    n_seeds: usize,
    mut progress: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>, PipelineError> {
    if modes.is_empty() || n_seeds == 0 {
        return Err(PipelineError::Config("ablation needs at least one mode and one seed".into()));
    }
    base.validate()?;
    let data = generate_dataset(spec)?;
    let mut cache: HashMap<String, Trained> = HashMap::new();
    let mut rows = Vec::new();
    for s in 0..n_seeds as u64 {
        for &mode in modes {
            let cfg = TrainConfig { seed: base.seed + s, ablation: mode, ..base.clone() };
            let key1 = mode.uses_rationale().then(|| {
                serde_json::to_string(&StageKey {
                    stage: Stage::Rationale,
                    seed: cfg.seed,
                    vote: mode.training_vote(&cfg.vote, Stage::Rationale),
                    uses_rationale: true,
                    source: RationaleSource::Gold,
                    upstream: None,
                })
                .expect("keys serialize")
            });
            if let Some(k) = &key1 {
                if !cache.contains_key(k) {
                    cache.insert(k.clone(), train_stage1(&data.train, model, &cfg)?);
                }
            }
            let predicted = mode.uses_rationale() && cfg.stage2_rationale_source == RationaleSource::VotedPredicted;
            let key2 = serde_json::to_string(&StageKey {
                stage: Stage::Answer,
                seed: cfg.seed,
                vote: mode.training_vote(&cfg.vote, Stage::Answer),
                uses_rationale: mode.uses_rationale(),
                source: if mode.uses_rationale() { cfg.stage2_rationale_source } else { RationaleSource::Gold },
                upstream: if predicted { key1.as_deref() } else { None },
            })
            .expect("keys serialize");
            let stage1 = key1.as_ref().map(|k| &cache[k].params);
            if !cache.contains_key(&key2) {
                let trained = train_stage2(&data.train, model, &cfg, stage1)?;
                cache.insert(key2.clone(), trained);
            }
            let stage1 = key1.as_ref().map(|k| &cache[k].params);
            let report = evaluate(&data.test, stage1, &cache[&key2].params, &cfg, eval)?;
            let row = AblationRow {
                mode,
                seed: cfg.seed,
                test_accuracy: report.test_accuracy,
                rouge_l: report.rouge_l,
                bias_sq: report.bias_sq,
                variance: report.variance,
                residual: report.residual,
                jensen_gap: report.jensen_gap,
                gold_rationale_accuracy: report.gold_rationale_accuracy,
            };
            progress(&row);
            rows.push(row);
        }
        // Trainings never cross seeds.
        cache.clear();
    }
    Ok(rows)
}
