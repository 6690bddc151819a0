use super::*;
use crate::model::{ModelConfig, ModelParams, MultimodalExample};
use crate::synthdata::{generate_dataset, vocab::SEP, DatasetSpec};
use crate::voting::VoteConfig;

fn tiny_model() -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, ..ModelConfig::default() }
}

fn data(n: usize) -> Vec<MultimodalExample> {
    generate_dataset(&DatasetSpec { seed: 11, n_train: n, n_val: 1, n_test: 1, ..DatasetSpec::default() })
        .unwrap()
        .train
}

fn quick(mode: AblationMode) -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 3, ablation: mode, ..TrainConfig::default() }
}

#[test]
fn ablation_modes_force_the_documented_vote() {
    let base = VoteConfig::default();
    let r = |m: AblationMode| m.training_vote(&base, Stage::Rationale);
    let a = |m: AblationMode| m.training_vote(&base, Stage::Answer);
    assert_eq!(r(AblationMode::Full), base);
    assert_eq!(r(AblationMode::MeanOnly).alpha, 1.0);
    assert_eq!(r(AblationMode::WeightedOnly).alpha, 0.0);
    assert_eq!(r(AblationMode::NoVoteRationale).n_rationale_samples, 1);
    assert_eq!(a(AblationMode::NoVoteRationale), base);
    assert_eq!(a(AblationMode::NoVoteAnswer).n_answer_samples, 1);
    assert_eq!(r(AblationMode::NoVoteAnswer), base);
    assert_eq!(r(AblationMode::InferenceVoting).n_rationale_samples, 1);
    assert_eq!(a(AblationMode::InferenceVoting).n_answer_samples, 1);
    // Single-pass settings collapse to one key whatever alpha says.
    assert_eq!(r(AblationMode::NoVoteRationale), a(AblationMode::NoVoteAnswer));
    for m in AblationMode::ALL {
        assert_eq!(AblationMode::parse(m.name()), Some(m));
    }
    assert_eq!(AblationMode::parse("bogus"), None);
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(matches!(
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate(),
        Err(PipelineError::Config(_))
    ));
    assert!(matches!(
        TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate(),
        Err(PipelineError::Config(_))
    ));
    let bad_vote = TrainConfig { vote: VoteConfig { alpha: 2.0, ..VoteConfig::default() }, ..TrainConfig::default() };
    assert!(matches!(bad_vote.validate(), Err(PipelineError::Voting(_))));
}

#[test]
fn single_pass_voting_matches_plain_cross_entropy() {
    let examples = stage1_examples(&data(5));
    let cfg = quick(AblationMode::Full);
    let one = VoteConfig { n_rationale_samples: 1, ..VoteConfig::default() };
    let voted = train_stage(Stage::Rationale, &examples, &tiny_model(), &cfg, &Objective::voted(one, Stage::Rationale))
        .unwrap();
    let plain = train_stage(Stage::Rationale, &examples, &tiny_model(), &cfg, &Objective::PlainCrossEntropy).unwrap();
    let bits = |t: &Trained| t.curve.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&voted), bits(&plain));
    assert_eq!(voted.params, plain.params);
}

#[test]
fn training_is_deterministic_and_seed_dependent() {
    let d = data(4);
    let a = train_stage1(&d, &tiny_model(), &quick(AblationMode::Full)).unwrap();
    let b = train_stage1(&d, &tiny_model(), &quick(AblationMode::Full)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.curve.len(), 2 * 2);
    let c = train_stage1(&d, &tiny_model(), &TrainConfig { seed: 1, ..quick(AblationMode::Full) }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn non_finite_loss_aborts_with_batch_id() {
    let mut d = data(4);
    d[2].image_features[0] = f64::NAN;
    let err = train_stage1(&d, &tiny_model(), &TrainConfig { batch_size: 4, ..quick(AblationMode::Full) }).unwrap_err();
    match err {
        PipelineError::NonFinite { stage, epoch, batch, examples } => {
            assert_eq!((stage, epoch, batch), (1, 0, 0));
            assert!(examples.contains(&d[2].id));
        }
        other => panic!("expected non-finite error, got {other}"),
    }
}

#[test]
fn no_rationale_mode_feeds_only_the_question() {
    let d = data(3);
    let sources = stage2_sources(&d, &quick(AblationMode::NoRationale), None).unwrap();
    for (s, e) in sources.iter().zip(&d) {
        let mut expected = e.question_tokens.clone();
        expected.push(SEP);
        assert_eq!(s.source, expected);
        assert_eq!(s.target, e.answer_target());
    }
    let trained = train_stage2(&d, &tiny_model(), &quick(AblationMode::NoRationale), None).unwrap();
    assert!(trained.final_loss().unwrap().is_finite());
}

#[test]
fn predicted_source_requires_stage1() {
    let cfg = TrainConfig { stage2_rationale_source: RationaleSource::VotedPredicted, ..quick(AblationMode::Full) };
    assert!(matches!(stage2_sources(&data(2), &cfg, None), Err(PipelineError::Config(_))));
}

#[test]
fn default_inference_ignores_sample_counts() {
    let d = data(3);
    let s1 = ModelParams::init(&tiny_model(), 1).unwrap();
    let s2 = ModelParams::init(&tiny_model(), 2).unwrap();
    for ex in &d {
        let reference = infer(ex, Some(&s1), &s2, &TrainConfig::default()).unwrap();
        for n in [1, 4, 8] {
            let vote = VoteConfig { n_rationale_samples: n, n_answer_samples: n, ..VoteConfig::default() };
            let cfg = TrainConfig { vote, ..TrainConfig::default() };
            assert_eq!(infer(ex, Some(&s1), &s2, &cfg).unwrap(), reference);
        }
        assert!(reference.choice < ex.choices.len());
    }
}

#[test]
fn inference_voting_without_dropout_equals_greedy() {
    let d = data(3);
    let model = ModelConfig { dropout_p: 0.0, ..tiny_model() };
    let s1 = ModelParams::init(&model, 1).unwrap();
    let s2 = ModelParams::init(&model, 2).unwrap();
    for ex in &d {
        let greedy = infer(ex, Some(&s1), &s2, &TrainConfig::default()).unwrap();
        let voted = infer(
            ex,
            Some(&s1),
            &s2,
            &TrainConfig { ablation: AblationMode::InferenceVoting, ..TrainConfig::default() },
        )
        .unwrap();
        assert_eq!(voted.rationale, greedy.rationale);
        assert_eq!(voted.choice, greedy.choice);
    }
}

#[test]
fn inference_voting_with_dropout_is_deterministic() {
    let d = data(2);
    let s1 = ModelParams::init(&tiny_model(), 1).unwrap();
    let s2 = ModelParams::init(&tiny_model(), 2).unwrap();
    let cfg = TrainConfig { ablation: AblationMode::InferenceVoting, ..TrainConfig::default() };
    for ex in &d {
        let a = infer(ex, Some(&s1), &s2, &cfg).unwrap();
        assert_eq!(a, infer(ex, Some(&s1), &s2, &cfg).unwrap());
        assert!(a.choice < ex.choices.len());
    }
}

#[test]
fn summary_statistics() {
    let row = |mode, seed, acc| AblationRow {
        mode,
        seed,
        test_accuracy: acc,
        rouge_l: 0.5,
        bias_sq: 0.0,
        variance: 0.0,
        residual: 0.0,
        jensen_gap: 0.0,
        gold_rationale_accuracy: 1.0,
    };
    let rows =
        vec![row(AblationMode::Full, 0, 0.5), row(AblationMode::MeanOnly, 0, 0.1), row(AblationMode::Full, 1, 0.7)];
    let s = summarize(&rows);
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].mode, AblationMode::Full);
    assert_eq!(s[0].n_seeds, 2);
    assert!((s[0].accuracy_mean - 0.6).abs() < 1e-15);
    assert!((s[0].accuracy_std - 0.02f64.sqrt()).abs() < 1e-12);
    assert_eq!(s[1].accuracy_std, 0.0);
    let csv = AblationRow::to_csv(&rows);
    assert_eq!(csv.lines().next().unwrap(), "mode,seed,test_accuracy,rouge_l,bias_sq,variance,residual,jensen_gap");
    assert_eq!(csv.lines().nth(1).unwrap(), "full,0,0.5,0.5,0,0,0,0");
}

#[test]
fn single_mode_ablation_is_reproducible() {
    let spec = DatasetSpec { seed: 2, n_train: 4, n_val: 1, n_test: 3, ..DatasetSpec::default() };
    let eval = crate::eval::EvalConfig { diagnostic_examples: 1, diagnostic_samples: 2, ..Default::default() };
    let run = || {
        run_ablation(&spec, &tiny_model(), &quick(AblationMode::Full), &eval, &[AblationMode::Full], 1, |_| {}).unwrap()
    };
    let rows = run();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows, run());
    assert!(matches!(
        run_ablation(&spec, &tiny_model(), &quick(AblationMode::Full), &eval, &[], 1, |_| {}),
        Err(PipelineError::Config(_))
    ));
}
