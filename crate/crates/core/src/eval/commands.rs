//! Command implementations behind the `mccot` binary; each writes fixed file names into an output directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{evaluate, EvalConfig, EvalReport};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelError, ModelParams, MultimodalExample};
use crate::numerics::GradCheckReport;
use crate::pipeline::{
    run_ablation, summarize, train_stage1, train_stage2, AblationMode, AblationRow, AblationSummary, LossPoint,
    PipelineError, TrainConfig,
};
use crate::synthdata::{generate_dataset, load_jsonl, save_jsonl, DataError, Dataset, DatasetSpec};
use crate::voting::{vote_logits, LogitStack, VotingError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.json";
pub const LOSS_CURVE_FILE: &str = "losscurve.csv";
pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const STAGE2_FILE: &str = "stage2.ckpt";
pub const VOTED_FILE: &str = "voted.json";

#[derive(Debug, Error)]
pub enum CommandError {
    /// Bad configuration or arguments (exit status 2).
    #[error("{0}")]
    Config(String),
    /// Failure while running (exit status 1).
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Voting(#[from] VotingError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// A check ran but did not pass (exit status 1).
    #[error("{0}")]
    CheckFailed(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Config(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CommandError + '_ {
    move |source| CommandError::Io { path: path.to_path_buf(), source }
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CommandError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(&path))?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

/// The single JSON configuration document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CommandError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CommandError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CommandError> {
        let bad = |e: String| CommandError::Config(e);
        self.dataset.validate().map_err(|e| bad(e.to_string()))?;
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        self.train.validate().map_err(|e| bad(e.to_string()))?;
        if self.model.image_cells != self.dataset.image_cells()
            || self.model.image_feature_dim != self.dataset.feature_dim
        {
            return Err(bad(format!(
                "model expects {}×{} image features, dataset produces {}×{}",
                self.model.image_cells,
                self.model.image_feature_dim,
                self.dataset.image_cells(),
                self.dataset.feature_dim
            )));
        }
        Ok(())
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CommandError> {
    let data = generate_dataset(&cfg.dataset)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut written = Vec::new();
    for (name, split) in [("train.jsonl", &data.train), ("val.jsonl", &data.val), ("test.jsonl", &data.test)] {
        let path = out.join(name);
        save_jsonl(&path, split)?;
        written.push(path);
    }
    Ok(written)
}

/// Generated splits, or the three JSONL files in `dir`.
pub fn load_data(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Dataset, CommandError> {
    let data = match dir {
        None => generate_dataset(&cfg.dataset)?,
        Some(d) => Dataset {
            train: load_jsonl(&d.join("train.jsonl"))?,
            val: load_jsonl(&d.join("val.jsonl"))?,
            test: load_jsonl(&d.join("test.jsonl"))?,
        },
    };
    for ex in data.train.iter().chain(&data.val).chain(&data.test) {
        ex.validate(&cfg.model)?;
    }
    Ok(data)
}

fn row_of(mode: AblationMode, seed: u64, r: &EvalReport) -> AblationRow {
    AblationRow {
        mode,
        seed,
        test_accuracy: r.test_accuracy,
        rouge_l: r.rouge_l,
        bias_sq: r.bias_sq,
        variance: r.variance,
        residual: r.residual,
        jensen_gap: r.jensen_gap,
        gold_rationale_accuracy: r.gold_rationale_accuracy,
    }
}

fn loss_curve_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("stage,epoch,batch,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.stage, p.epoch, p.batch, p.loss));
    }
    out
}

/// Trains both stages for `cfg.train.ablation`, saves checkpoints and evaluates on the test split.
pub fn train(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<EvalReport, CommandError> {
    let tc = &cfg.train;
    let stage1 = if tc.ablation.uses_rationale() { Some(train_stage1(&data.train, &cfg.model, tc)?) } else { None };
    let stage2 = train_stage2(&data.train, &cfg.model, tc, stage1.as_ref().map(|s| &s.params))?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut curve = Vec::new();
    if let Some(s1) = &stage1 {
        save_checkpoint(&s1.params, &out.join(STAGE1_FILE))?;
        curve.extend_from_slice(&s1.curve);
    }
    save_checkpoint(&stage2.params, &out.join(STAGE2_FILE))?;
    curve.extend_from_slice(&stage2.curve);
    write(out, LOSS_CURVE_FILE, &loss_curve_csv(&curve))?;
    let report = evaluate(&data.test, stage1.as_ref().map(|s| &s.params), &stage2.params, tc, &cfg.eval)?;
    write(out, METRICS_FILE, &AblationRow::to_csv(&[row_of(tc.ablation, tc.seed, &report)]))?;
    write(out, REPORT_FILE, &to_json(&report))?;
    Ok(report)
}

/// Evaluates saved checkpoints on `examples`.
pub fn eval(
    cfg: &ExperimentConfig,
    examples: &[MultimodalExample],
    stage1: Option<&Path>,
    stage2: &Path,
    out: &Path,
) -> Result<EvalReport, CommandError> {
    let s1: Option<ModelParams> = stage1.map(load_checkpoint).transpose()?;
    let s2 = load_checkpoint(stage2)?;
    if cfg.train.ablation.uses_rationale() && s1.is_none() {
        return Err(CommandError::Config(format!("mode {} needs a stage-1 checkpoint", cfg.train.ablation)));
    }
    let report = evaluate(examples, s1.as_ref(), &s2, &cfg.train, &cfg.eval)?;
    write(out, METRICS_FILE, &AblationRow::to_csv(&[row_of(cfg.train.ablation, cfg.train.seed, &report)]))?;
    write(out, REPORT_FILE, &to_json(&report))?;
    Ok(report)
}

/// Ablation grid → metrics.csv (per run), summary.csv (per mode) and report.json.
pub fn ablate(
    cfg: &ExperimentConfig,
    modes: &[AblationMode],
    n_seeds: usize,
    out: &Path,
    progress: impl FnMut(&AblationRow),
) -> Result<(Vec<AblationRow>, Vec<AblationSummary>), CommandError> {
    let rows = run_ablation(&cfg.dataset, &cfg.model, &cfg.train, &cfg.eval, modes, n_seeds, progress)?;
    let summary = summarize(&rows);
    write(out, METRICS_FILE, &AblationRow::to_csv(&rows))?;
    write(out, SUMMARY_FILE, &AblationSummary::to_csv(&summary))?;
    write(out, REPORT_FILE, &to_json(&serde_json::json!({ "per_mode": rows, "summary": summary })))?;
    Ok((rows, summary))
}

/// Stack file: `{"shape": [N, L, V], "data": [...]}` with data sample-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackFile {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

/// Votes over a stack file with `cfg.train.vote` and writes voted.json.
pub fn vote(cfg: &ExperimentConfig, stack: &Path, out: &Path) -> Result<PathBuf, CommandError> {
    let text = fs::read_to_string(stack).map_err(io_err(stack))?;
    let file: StackFile =
        serde_json::from_str(&text).map_err(|e| CommandError::Config(format!("{}: {e}", stack.display())))?;
    let [n, l, v] = file.shape;
    let stack = LogitStack::new(n, l, v, file.data)?;
    let voted = vote_logits(&stack, &cfg.train.vote)?;
    write(out, VOTED_FILE, &to_json(&voted))
}

/// End-to-end gradient check of the voted rationale loss on a toy model.
pub fn gradcheck(tolerance: f64) -> Result<GradCheckReport<f64>, CommandError> {
    let report = crate::pipeline::end_to_end_gradcheck().map_err(CommandError::Pipeline)?;
    if !(report.max_rel_error <= tolerance) {
        return Err(CommandError::CheckFailed(format!(
            "max relative error {} exceeds {tolerance}",
            report.max_rel_error
        )));
    }
    Ok(report)
}
