//! A default-width model memorizes ten examples; every downstream path must then agree with gold.

use mccot::eval::{evaluate, EvalConfig};
use mccot::model::ModelConfig;
use mccot::pipeline::{infer, stage2_sources, train_stage1, train_stage2, RationaleSource, TrainConfig};
use mccot::synthdata::{generate_dataset, DatasetSpec};

#[test]
fn ten_examples_are_memorized_end_to_end() {
    let spec = DatasetSpec { seed: 1, n_train: 10, n_val: 1, n_test: 1, ..DatasetSpec::default() };
    let data = generate_dataset(&spec).unwrap();
    let model = ModelConfig::default();
    let cfg = TrainConfig { epochs: 200, batch_size: 1, learning_rate: 0.1, ..TrainConfig::default() };

    let stage1 = train_stage1(&data.train, &model, &cfg).unwrap();
    let loss1 = stage1.final_loss().unwrap();
    assert!(loss1 < 0.05, "stage-1 loss {loss1}");
    let first = stage1.curve.iter().find(|p| p.epoch == 0).unwrap().loss;
    assert!(first > 10.0 * loss1);

    let gold = stage2_sources(&data.train, &cfg, None).unwrap();
    let predicted_cfg = TrainConfig { stage2_rationale_source: RationaleSource::VotedPredicted, ..cfg.clone() };
    let predicted = stage2_sources(&data.train, &predicted_cfg, Some(&stage1.params)).unwrap();
    assert_eq!(gold, predicted);

    let stage2 = train_stage2(&data.train, &model, &cfg, None).unwrap();
    let loss2 = stage2.final_loss().unwrap();
    assert!(loss2 < 0.05, "stage-2 loss {loss2}");

    for ex in &data.train {
        let out = infer(ex, Some(&stage1.params), &stage2.params, &cfg).unwrap();
        assert_eq!(out.rationale, ex.rationale_tokens, "{}", ex.id);
        assert_eq!(out.choice, ex.answer_index, "{}", ex.id);
    }
    let report = evaluate(
        &data.train,
        Some(&stage1.params),
        &stage2.params,
        &cfg,
        &EvalConfig { diagnostic_examples: 2, diagnostic_samples: 4, ..EvalConfig::default() },
    )
    .unwrap();
    assert_eq!(report.test_accuracy, 1.0);
    assert_eq!(report.rouge_l, 1.0);
}
