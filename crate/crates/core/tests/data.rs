use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use clspool::data::{
    gen_synthetic, load_jsonl, subsample, tokenize, tokenize_pair, write_jsonl, Dataset, Example,
    Label, SyntheticTaskSpec, TaskKind, Vocab,
};
use clspool::encoder::{CLS_ID, SEP_ID, UNK_ID};
use clspool::Error;
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::from_tokens(["x", "a", "b"]).unwrap()
}

fn jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
    f.flush().unwrap();
    f
}

fn dataset_error_line(e: Error) -> usize {
    match e {
        Error::Dataset { line, .. } => line,
        other => panic!("expected a dataset error, got {other}"),
    }
}

fn class_counts(d: &Dataset) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for e in &d.examples {
        *m.entry(e.label.class().unwrap()).or_insert(0) += 1;
    }
    m
}

#[test]
fn tokenize_examples() {
    let v = vocab();
    assert_eq!(tokenize("", &v, 64), vec![1]);
    assert_eq!(tokenize("a b", &v, 64), vec![1, 5, 6]);
    assert_eq!(tokenize("unseen", &v, 64), vec![1, 2]);
    assert_eq!(tokenize("A b", &v, 64), vec![1, 5, 6]);
    assert_eq!(tokenize_pair("a", "b x", &v, 64), vec![1, 5, SEP_ID, 6, 4]);
    // Truncation drops the tail but keeps [CLS].
    assert_eq!(tokenize("a b a b", &v, 2), vec![1, 5]);
    assert_eq!(tokenize("a b", &v, 0), vec![1]);
}

#[test]
fn vocab_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    std::fs::write(&path, "x\na\nb\n").unwrap();
    let v = Vocab::load(&path).unwrap();
    assert_eq!(v, vocab());
    assert_eq!(v.size(), 7);
    assert_eq!(v.token(1), Some("[cls]"));
    assert_eq!(v.token(5), Some("a"));
    let again = dir.path().join("again.txt");
    v.save(&again).unwrap();
    assert_eq!(Vocab::load(&again).unwrap(), v);
}

#[test]
fn load_jsonl_examples() {
    let f = jsonl(&[r#"{"tokens":[5,6],"label":1}"#]);
    let d = load_jsonl(f.path(), None, 64).unwrap();
    assert_eq!(
        d.examples,
        vec![Example {
            tokens: vec![1, 5, 6],
            label: Label::Class(1)
        }]
    );

    let v = vocab();
    let f = jsonl(&[r#"{"text":"a b","label":0}"#, r#"{"text":"a","text_pair":"b","label":1}"#]);
    let d = load_jsonl(f.path(), Some(&v), 64).unwrap();
    assert_eq!(d.examples[0].tokens, vec![1, 5, 6]);
    assert_eq!(d.examples[1].tokens, vec![1, 5, SEP_ID, 6]);

    let f = jsonl(&[r#"{"tokens":[5],"label":0.25}"#]);
    let d = load_jsonl(f.path(), None, 64).unwrap();
    assert_eq!(d.examples[0].label, Label::Real(0.25));
    assert!(d.is_regression());
}

#[test]
fn load_jsonl_errors_name_the_line() {
    let ok = r#"{"tokens":[5],"label":0}"#;
    let cases = [
        (vec![ok, "{}"], 2),
        (vec![ok, ok, "not json"], 3),
        (vec![r#"{"tokens":[5]}"#], 1),
        (vec![ok, r#"{"text":"a","label":0}"#], 2),
        (vec![r#"{"tokens":[5],"text":"a","label":0}"#], 1),
        (vec![r#"{"tokens":[5],"label":-1}"#], 1),
        (vec![r#"{"tokens":[5],"label":0,"extra":1}"#], 1),
    ];
    for (lines, line) in cases {
        let f = jsonl(&lines);
        let err = load_jsonl(f.path(), Some(&vocab()), 64).unwrap_err();
        assert_eq!(dataset_error_line(err), line, "{lines:?}");
    }
    let f = jsonl(&["{}"]);
    let msg = load_jsonl(f.path(), None, 64).unwrap_err().to_string();
    assert!(msg.contains("schema"), "{msg}");
    // Text without a vocabulary is rejected too.
    let f = jsonl(&[r#"{"text":"a","label":0}"#]);
    assert_eq!(dataset_error_line(load_jsonl(f.path(), None, 64).unwrap_err()), 1);
}

#[test]
fn synthetic_generation_is_deterministic_and_disjoint() {
    for kind in [TaskKind::PatternContainment, TaskKind::MajorityToken, TaskKind::PairSimilarity] {
        let spec = SyntheticTaskSpec::standard(kind, 42);
        let (train, eval) = gen_synthetic(&spec).unwrap();
        let (train2, eval2) = gen_synthetic(&spec).unwrap();
        assert_eq!(train, train2);
        assert_eq!(eval, eval2);
        assert_eq!((train.len(), eval.len()), (2000, 500));
        let seen: HashSet<_> = train.examples.iter().map(|e| &e.tokens).collect();
        assert!(eval.examples.iter().all(|e| !seen.contains(&e.tokens)));
        assert_eq!(seen.len(), train.len());
        let other = gen_synthetic(&SyntheticTaskSpec::standard(kind, 43)).unwrap().0;
        assert_ne!(train, other);
        for e in train.examples.iter().chain(&eval.examples) {
            assert_eq!(e.tokens[0], CLS_ID);
            assert!(e.tokens.iter().all(|&t| (t as usize) < spec.vocab_size));
            assert!(e.tokens.len() <= spec.max_sequence_len());
        }
    }
}

#[test]
fn pattern_labels_balance_at_ten_thousand() {
    let spec = SyntheticTaskSpec {
        train_size: 10_000,
        eval_size: 10,
        max_len: 20,
        min_len: 8,
        ..SyntheticTaskSpec::standard(TaskKind::PatternContainment, 3)
    };
    let (train, _) = gen_synthetic(&spec).unwrap();
    let pos = train.examples.iter().filter(|e| e.label == Label::Class(1)).count();
    let frac = pos as f64 / train.len() as f64;
    assert!((frac - 0.5).abs() <= 0.02, "positive fraction {frac}");
}

#[test]
fn pair_labels_are_in_unit_interval() {
    let (train, eval) = gen_synthetic(&SyntheticTaskSpec::standard(TaskKind::PairSimilarity, 8)).unwrap();
    for e in train.examples.iter().chain(&eval.examples) {
        let v = e.label.value();
        assert!((0.0..=1.0).contains(&v));
        assert_eq!(e.tokens.iter().filter(|&&t| t == SEP_ID).count(), 1);
    }
}

#[test]
fn infeasible_specs_are_errors() {
    let mut spec = SyntheticTaskSpec::standard(TaskKind::PatternContainment, 0);
    spec.min_len = 1;
    spec.max_len = 1;
    assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
    let mut spec = SyntheticTaskSpec::standard(TaskKind::MajorityToken, 0);
    spec.eval_size = 0;
    assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
    // Vocabulary too small for the number of distinct sequences asked for.
    let spec = SyntheticTaskSpec {
        vocab_size: 7,
        min_len: 2,
        max_len: 2,
        train_size: 100,
        eval_size: 10,
        ..SyntheticTaskSpec::standard(TaskKind::PatternContainment, 0)
    };
    assert!(matches!(gen_synthetic(&spec), Err(Error::Config(_))));
}

fn small_pattern(size: usize, seed: u64) -> Dataset {
    let spec = SyntheticTaskSpec {
        train_size: size,
        eval_size: 1,
        ..SyntheticTaskSpec::standard(TaskKind::PatternContainment, seed)
    };
    gen_synthetic(&spec).unwrap().0
}

#[test]
fn subsample_examples() {
    let d = small_pattern(101, 1);
    let full = subsample(&d, d.len(), 7).unwrap();
    let mut a: Vec<_> = d.examples.iter().map(|e| e.tokens.clone()).collect();
    let mut b: Vec<_> = full.examples.iter().map(|e| e.tokens.clone()).collect();
    assert_ne!(a, b);
    a.sort();
    b.sort();
    assert_eq!(a, b);

    assert_eq!(subsample(&d, 1, 7).unwrap().len(), 1);
    assert!(matches!(subsample(&d, 102, 7), Err(Error::Input(_))));
    assert_eq!(subsample(&d, 30, 5).unwrap(), subsample(&d, 30, 5).unwrap());
}

#[test]
fn subsample_is_stratified_within_one_example() {
    // Skew the classes so proportional allocation is not trivially half.
    let mut d = small_pattern(400, 2);
    d.examples.retain(|e| e.label == Label::Class(0) || e.tokens[5] % 3 == 0);
    let orig = class_counts(&d);
    for n in [1, 7, 33, 100, d.len() - 1] {
        for seed in 0..5 {
            let s = subsample(&d, n, seed).unwrap();
            assert_eq!(s.len(), n);
            let got = class_counts(&s);
            for (c, &count) in &orig {
                let exact = n as f64 * count as f64 / d.len() as f64;
                let g = *got.get(c).unwrap_or(&0) as f64;
                assert!((g - exact).abs() <= 1.0, "class {c}: {g} vs {exact}");
            }
            let ids: HashSet<_> = s.examples.iter().map(|e| &e.tokens).collect();
            assert_eq!(ids.len(), n);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn jsonl_round_trip(
        rows in prop::collection::vec(
            (prop::collection::vec(0u32..500, 0..20), prop_oneof![
                (0usize..5).prop_map(Label::Class),
                (-1e6f64..1e6).prop_map(Label::Real),
                (-5i32..5).prop_map(|v| Label::Real(v as f64)),
            ]),
            1..30,
        )
    ) {
        let examples: Vec<Example> = rows
            .into_iter()
            .map(|(body, label)| {
                let mut tokens = vec![CLS_ID];
                tokens.extend(body);
                Example { tokens, label }
            })
            .collect();
        let data = Dataset { examples };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_jsonl(f.path(), &data).unwrap();
        prop_assert_eq!(load_jsonl(f.path(), None, 64).unwrap(), data);
    }

    #[test]
    fn tokenize_ids_stay_in_vocabulary(
        words in prop::collection::vec("[a-e]{1,3}", 0..30),
        max_len in 1usize..40,
    ) {
        let v = Vocab::from_tokens(["a", "b", "ab", "cde"]).unwrap();
        let ids = tokenize(&words.join(" "), &v, max_len);
        prop_assert_eq!(ids[0], CLS_ID);
        prop_assert!(ids.len() <= max_len);
        prop_assert!(ids.iter().all(|&t| (t as usize) < v.size()));
        prop_assert!(ids[1..].iter().all(|&t| t == UNK_ID || t >= 4));
    }
}
