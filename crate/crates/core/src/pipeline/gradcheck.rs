//! Finite-difference check of the full voted rationale loss on a toy model.

use super::{example_loss, stage1_examples, Objective, PipelineError, Stage};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{finite_difference_check, GradCheckReport, NumericsError, RngStream};
use crate::synthdata::{generate_dataset, DatasetSpec};
use crate::voting::VoteConfig;

/// Toy model with every width ≤ 8.
pub fn toy_model() -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, image_feature_dim: 8, image_cells: 4, ..ModelConfig::default() }
}

/// Central differences on the mean voted loss of a 4-example batch, 3 dropout passes each.
///
/// Dropout masks are replayed from fixed streams so every perturbed evaluation sees the same masks.
pub fn end_to_end_gradcheck() -> Result<GradCheckReport<f64>, PipelineError> {
    let model = toy_model();
    let spec = DatasetSpec { seed: 5, n_train: 4, n_val: 1, n_test: 1, grid_size: 2, ..DatasetSpec::default() };
    let data = generate_dataset(&spec)?;
    let mut batch = stage1_examples(&data.train);
    let mut rng = RngStream::new(5, 1);
    for ex in &mut batch {
        // Shrink the image to the toy model's 4 cells × 8 features and keep a short target.
        ex.image = (0..model.image_cells * model.image_feature_dim).map(|_| rng.normal()).collect();
        ex.target.truncate(6);
    }
    let params = ModelParams::init(&model, 21)?;
    let vote = VoteConfig { n_rationale_samples: 3, ..VoteConfig::default() };
    let objective = Objective::voted(vote, Stage::Rationale);
    let tensors: Vec<_> = params.tensors.values().cloned().collect();
    let as_numeric = |e: &dyn std::fmt::Display| NumericsError::Numeric(e.to_string());
    Ok(finite_difference_check(&tensors, 1e-5, |tape, vars| {
        let w = params.weights_from(tape, vars).map_err(|e| as_numeric(&e))?;
        let mut total = None;
        for (k, ex) in batch.iter().enumerate() {
            let stream = |i: usize| RngStream::from_path(99, &[k as u64, i as u64]);
            let loss = example_loss(tape, &w, &model, ex, &objective, stream).map_err(|e| as_numeric(&e))?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
        }
        Ok(tape.div_scalar(total.expect("batch is non-empty"), batch.len() as f64))
    })?)
}
