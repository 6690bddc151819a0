//! Deterministic grid-world multimodal QA task with gold rationales.
//!
//! Each example is a G×G grid of cells carrying a shape, a color and a count.
//! The "image" is a per-cell feature vector `[one-hot(shape) ‖ one-hot(color) ‖ count/5]`
//! zero-padded to the feature width and perturbed with Gaussian noise. Three
//! question templates are mixed; the two-hop "color of the largest count"
//! template dominates so that answering requires the rationale's chain.

mod io;
pub mod vocab;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::MultimodalExample;
use crate::numerics::RngStream;
use crate::TokenId;
use vocab::{vocab, COLORS, SHAPES, YES_NO_CHOICES};

pub use io::{load_jsonl, parse_jsonl, save_jsonl, to_jsonl};

/// Width of the meaningful part of a cell feature: 8 shapes, 8 colors, 1 count.
pub const CELL_FEATURES: usize = 17;
pub const MAX_COUNT: u8 = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("template produced unknown token {0:?}")]
    Generation(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub grid_size: usize,
    /// Weights of the (largest-count color, shape lookup, count comparison) templates.
    pub template_mix: Vec<f64>,
    pub noise_sigma: f64,
    pub feature_dim: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            grid_size: 4,
            template_mix: vec![0.6, 0.2, 0.2],
            noise_sigma: 0.05,
            feature_dim: 24,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Spec(m.to_string()));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be >= 1");
        }
        if !(2..=10).contains(&self.grid_size) {
            return bad("grid_size must be in 2..=10");
        }
        if self.template_mix.len() != 3 || self.template_mix.iter().any(|w| !(*w >= 0.0)) {
            return bad("template_mix needs three non-negative weights");
        }
        if (self.template_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("template_mix must sum to 1");
        }
        if self.feature_dim < CELL_FEATURES {
            return bad("feature_dim must be >= 17");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        Ok(())
    }

    pub fn image_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub shape: u8,
    pub color: u8,
    pub count: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridWorld {
    pub size: usize,
    /// Row-major.
    pub cells: Vec<Cell>,
    pub noise_sigma: f64,
}

impl GridWorld {
    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.size + col]
    }

    /// Row-major index of the unique largest count.
    pub fn argmax_count(&self) -> usize {
        let max = self.cells.iter().map(|c| c.count).max().unwrap_or(0);
        self.cells.iter().position(|c| c.count == max).unwrap_or(0)
    }

    pub fn has_unique_max(&self) -> bool {
        let max = self.cells.iter().map(|c| c.count).max().unwrap_or(0);
        self.cells.iter().filter(|c| c.count == max).count() == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    LargestCountColor,
    ShapeAt,
    CompareCounts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> (u64, &'static str) {
        match self {
            Split::Train => (0, "train"),
            Split::Val => (1, "val"),
            Split::Test => (2, "test"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<MultimodalExample>,
    pub val: Vec<MultimodalExample>,
    pub test: Vec<MultimodalExample>,
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let split = |s: Split, n: usize| -> Result<Vec<MultimodalExample>, DataError> {
        (0..n).map(|i| generate_example(spec, s, i).map(|(_, _, e)| e)).collect()
    };
    Ok(Dataset {
        train: split(Split::Train, spec.n_train)?,
        val: split(Split::Val, spec.n_val)?,
        test: split(Split::Test, spec.n_test)?,
    })
}

/// One example drawn from its own stream `(spec.seed, [split, index])`.
pub fn generate_example(
    spec: &DatasetSpec,
    split: Split,
    index: usize,
) -> Result<(GridWorld, Template, MultimodalExample), DataError> {
    let (split_id, name) = split.tag();
    let mut rng = RngStream::from_path(spec.seed, &[split_id, index as u64]);
    let world = sample_world(spec, &mut rng);
    let template = pick_template(&spec.template_mix, &mut rng);
    let g = spec.grid_size;
    let (question, rationale, gold, mut choices) = match template {
        Template::LargestCountColor => {
            let m = world.argmax_count();
            let cell = world.cells[m];
            let color = COLORS[cell.color as usize];
            let q = "what is the color of the cell with the largest count ?".to_string();
            let r = format!(
                "the cell at row {} column {} has count {} . that is the largest count . its color is {color} . the answer is {color} .",
                m / g,
                m % g,
                cell.count
            );
            (q, r, color, distractors(&COLORS, color, &mut rng))
        }
        Template::ShapeAt => {
            let k = rng.below(g * g);
            let shape = SHAPES[world.cells[k].shape as usize];
            let q = format!("what shape is at row {} column {} ?", k / g, k % g);
            let r = format!("the cell at row {} column {} has shape {shape} . the answer is {shape} .", k / g, k % g);
            (q, r, shape, distractors(&SHAPES, shape, &mut rng))
        }
        Template::CompareCounts => {
            let (a, b) = loop {
                let a = rng.below(g * g);
                let b = rng.below(g * g);
                if world.cells[a].count != world.cells[b].count {
                    break (a, b);
                }
            };
            let (ka, kb) = (world.cells[a].count, world.cells[b].count);
            let q = format!(
                "is the count at row {} column {} greater than at row {} column {} ?",
                a / g,
                a % g,
                b / g,
                b % g
            );
            let (relation, gold) = if ka > kb { ("greater", "yes") } else { ("less", "no") };
            let r = format!(
                "the count at row {} column {} is {ka} . the count at row {} column {} is {kb} . {ka} is {relation} than {kb} . so the answer is {gold} .",
                a / g,
                a % g,
                b / g,
                b % g
            );
            (q, r, gold, YES_NO_CHOICES.iter().map(|s| s.to_string()).collect())
        }
    };
    choices.shuffle(&mut rng);
    let answer_index = choices.iter().position(|c| c == gold).expect("gold is among choices");
    let image = render_features(&world, spec.feature_dim, &mut rng);
    let encode = |s: &str| vocab().encode(s).map_err(DataError::Generation);
    let example = MultimodalExample {
        id: format!("{name}-{index:06}"),
        question_tokens: encode(&question)?,
        image_features: image,
        choices: choices.iter().map(|c| encode(c)).collect::<Result<_, _>>()?,
        answer_index,
        rationale_tokens: encode(&rationale)?,
    };
    Ok((world, template, example))
}

fn sample_world(spec: &DatasetSpec, rng: &mut RngStream) -> GridWorld {
    let n = spec.image_cells();
    let max_cell = rng.below(n);
    let max_count = 3 + rng.below(3) as u8;
    let cells = (0..n)
        .map(|k| {
            let shape = rng.below(SHAPES.len()) as u8;
            let color = rng.below(COLORS.len()) as u8;
            let count = if k == max_cell { max_count } else { 1 + rng.below(max_count as usize - 1) as u8 };
            Cell { shape, color, count }
        })
        .collect();
    GridWorld { size: spec.grid_size, cells, noise_sigma: spec.noise_sigma }
}

fn pick_template(mix: &[f64], rng: &mut RngStream) -> Template {
    let u = rng.uniform();
    if u < mix[0] {
        Template::LargestCountColor
    } else if u < mix[0] + mix[1] {
        Template::ShapeAt
    } else {
        Template::CompareCounts
    }
}

/// Gold plus three distinct other names from `pool`.
fn distractors(pool: &[&str], gold: &str, rng: &mut RngStream) -> Vec<String> {
    let mut others: Vec<&str> = pool.iter().copied().filter(|&p| p != gold).collect();
    others.shuffle(rng);
    std::iter::once(gold).chain(others.into_iter().take(3)).map(str::to_string).collect()
}

fn render_features(world: &GridWorld, feature_dim: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut out = Vec::with_capacity(world.cells.len() * feature_dim);
    for c in &world.cells {
        let mut f = vec![0.0; feature_dim];
        f[c.shape as usize] = 1.0;
        f[8 + c.color as usize] = 1.0;
        f[16] = c.count as f64 / MAX_COUNT as f64;
        for v in &mut f {
            *v += world.noise_sigma * rng.normal();
        }
        out.extend(f);
    }
    out
}

/// Answers from the rationale text alone, never the image.
///
/// Reads the attribute the rationale states ("its color is X", "has shape S")
/// or compares the two counts it states; returns the matching choice index.
pub fn read_answer_from_rationale(rationale: &[TokenId], choices: &[Vec<TokenId>]) -> Option<usize> {
    let v = vocab();
    let words: Vec<&str> = rationale.iter().filter_map(|&t| v.word(t)).collect();
    let after = |pat: &[&str]| -> Option<&str> {
        words.windows(pat.len() + 1).find(|w| &w[..pat.len()] == pat).map(|w| w[pat.len()])
    };
    let answer = if let Some(color) = after(&["color", "is"]) {
        color.to_string()
    } else if let Some(shape) = after(&["has", "shape"]) {
        shape.to_string()
    } else {
        let counts: Vec<u32> = words.windows(2).filter(|w| w[0] == "is").filter_map(|w| w[1].parse().ok()).collect();
        match counts.as_slice() {
            [a, b, ..] if a > b => "yes".into(),
            [_, _, ..] => "no".into(),
            _ => return None,
        }
    };
    let id = v.id(&answer)?;
    choices.iter().position(|c| c.as_slice() == [id])
}

#[cfg(test)]
mod tests;
