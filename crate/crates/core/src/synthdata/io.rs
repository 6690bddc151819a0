//! Line-delimited JSON dataset files, one example per line.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::vocab;
use super::DataError;
use crate::model::MultimodalExample;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    question: String,
    image: Vec<f64>,
    choices: Vec<String>,
    answer_index: usize,
    rationale: String,
}

pub fn to_jsonl(examples: &[MultimodalExample]) -> String {
    let v = vocab();
    let mut out = String::new();
    for e in examples {
        let rec = Record {
            id: e.id.clone(),
            question: v.decode(&e.question_tokens),
            image: e.image_features.clone(),
            choices: e.choices.iter().map(|c| v.decode(c)).collect(),
            answer_index: e.answer_index,
            rationale: v.decode(&e.rationale_tokens),
        };
        out.push_str(&serde_json::to_string(&rec).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn parse_jsonl(text: &str) -> Result<Vec<MultimodalExample>, DataError> {
    let v = vocab();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| DataError::Parse { line: line_no, message };
        let rec: Record = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let encode = |s: &str| v.encode(s).map_err(|w| fail(format!("unknown token {w:?}")));
        let choices = rec.choices.iter().map(|c| encode(c)).collect::<Result<Vec<_>, _>>()?;
        if rec.answer_index >= choices.len() {
            return Err(fail(format!("answer_index {} with {} choices", rec.answer_index, choices.len())));
        }
        out.push(MultimodalExample {
            id: rec.id,
            question_tokens: encode(&rec.question)?,
            image_features: rec.image,
            choices,
            answer_index: rec.answer_index,
            rationale_tokens: encode(&rec.rationale)?,
        });
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, examples: &[MultimodalExample]) -> Result<(), DataError> {
    fs::write(path, to_jsonl(examples))?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<MultimodalExample>, DataError> {
    parse_jsonl(&fs::read_to_string(path)?)
}
