use std::collections::HashSet;

use super::*;
use crate::synthdata::vocab::{vocab, VOCAB_SIZE};

fn small_spec() -> DatasetSpec {
    DatasetSpec { seed: 3, n_train: 40, n_val: 10, n_test: 10, ..DatasetSpec::default() }
}

#[test]
fn same_spec_gives_identical_bytes() {
    let a = generate_dataset(&small_spec()).unwrap();
    let b = generate_dataset(&small_spec()).unwrap();
    assert_eq!(to_jsonl(&a.train), to_jsonl(&b.train));
    assert_eq!(to_jsonl(&a.test), to_jsonl(&b.test));
    let c = generate_dataset(&DatasetSpec { seed: 4, ..small_spec() }).unwrap();
    assert_ne!(to_jsonl(&a.train), to_jsonl(&c.train));
}

#[test]
fn schema_invariants_hold() {
    let spec = DatasetSpec { n_train: 500, ..small_spec() };
    for i in 0..spec.n_train {
        let (world, template, e) = generate_example(&spec, Split::Train, i).unwrap();
        assert_eq!(e.choices.len(), 4);
        assert!(e.answer_index < 4);
        assert!(e.rationale_tokens.len() < 48, "{}", e.rationale_tokens.len());
        assert!(e.question_tokens.iter().chain(&e.rationale_tokens).all(|&t| (t as usize) < VOCAB_SIZE));
        assert_eq!(e.image_features.len(), 16 * 24);
        assert!(world.has_unique_max());
        let distinct: HashSet<_> = e.choices.iter().collect();
        assert_eq!(distinct.len(), 4);
        if template == Template::CompareCounts {
            // tie-free by construction
            let words = vocab().decode(&e.rationale_tokens);
            assert!(words.contains("greater than") || words.contains("less than"));
        }
    }
}

#[test]
fn gold_rationale_final_mention_is_the_gold_choice() {
    let spec = DatasetSpec { seed: 11, n_train: 10_000, n_val: 1, n_test: 1, ..DatasetSpec::default() };
    let data = generate_dataset(&spec).unwrap();
    let v = vocab();
    let is = v.id("is").unwrap();
    for e in &data.train {
        let r = &e.rationale_tokens;
        // "... the answer is X ."
        let pos = r.iter().rposition(|&t| t == is).unwrap();
        assert_eq!(&r[pos + 1..r.len() - 1], e.choices[e.answer_index].as_slice(), "{}", e.id);
    }
}

#[test]
fn rationale_alone_determines_the_answer() {
    let spec = DatasetSpec { seed: 12, n_train: 3000, n_val: 1, n_test: 1, ..DatasetSpec::default() };
    let data = generate_dataset(&spec).unwrap();
    for e in &data.train {
        assert_eq!(read_answer_from_rationale(&e.rationale_tokens, &e.choices), Some(e.answer_index), "{}", e.id);
    }
}

#[test]
fn template_mix_is_respected() {
    let spec = DatasetSpec { n_train: 4000, ..small_spec() };
    let mut counts = [0usize; 3];
    for i in 0..spec.n_train {
        let (_, t, _) = generate_example(&spec, Split::Train, i).unwrap();
        counts[t as usize] += 1;
    }
    let frac = counts[0] as f64 / spec.n_train as f64;
    assert!((frac - 0.6).abs() < 0.03, "{counts:?}");
}

#[test]
fn splits_do_not_share_examples() {
    let data = generate_dataset(&DatasetSpec { n_train: 300, n_val: 100, n_test: 100, ..small_spec() }).unwrap();
    let key = |e: &MultimodalExample| format!("{:?}|{:?}", e.question_tokens, e.image_features);
    let train: HashSet<String> = data.train.iter().map(key).collect();
    assert!(data.val.iter().chain(&data.test).all(|e| !train.contains(&key(e))));
    let val: HashSet<String> = data.val.iter().map(key).collect();
    assert!(data.test.iter().all(|e| !val.contains(&key(e))));
}

#[test]
fn jsonl_round_trip_and_errors() {
    let data = generate_dataset(&small_spec()).unwrap();
    let text = to_jsonl(&data.val);
    assert_eq!(parse_jsonl(&text).unwrap(), data.val);

    let truncated = &text[..text.len() - 40];
    match parse_jsonl(truncated) {
        Err(DataError::Parse { line, .. }) => assert_eq!(line, data.val.len()),
        other => panic!("expected parse error, got {other:?}"),
    }
}

#[test]
fn field_order_does_not_matter() {
    let data = generate_dataset(&small_spec()).unwrap();
    let line = to_jsonl(&data.val[..1]);
    let obj: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line.trim()).unwrap();
    let mut reversed = String::from("{");
    let parts: Vec<String> =
        obj.iter().rev().map(|(k, v)| format!("{}:{}", serde_json::to_string(k).unwrap(), v)).collect();
    reversed.push_str(&parts.join(","));
    reversed.push('}');
    assert!(reversed.starts_with("{\"rationale\""));
    assert_eq!(parse_jsonl(&reversed).unwrap(), data.val[..1].to_vec());
}

#[test]
fn unknown_words_and_bad_specs_are_rejected() {
    let data = generate_dataset(&small_spec()).unwrap();
    let line = to_jsonl(&data.val[..1]).replace("\"rationale\":\"the", "\"rationale\":\"zebra");
    assert!(matches!(parse_jsonl(&line), Err(DataError::Parse { line: 1, .. })));
    assert!(generate_dataset(&DatasetSpec { template_mix: vec![0.5, 0.5, 0.5], ..small_spec() }).is_err());
    assert!(generate_dataset(&DatasetSpec { n_val: 0, ..small_spec() }).is_err());
}
