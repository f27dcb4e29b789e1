use std::fs;

use ksod::datahub::{
    gen_synthetic, load_dataset, marker_count_predict, save_dataset, sidecar_path, DatasetFormat, SyntheticKind,
    SyntheticSpec, VocabParams,
};
use ksod::KsodError;

fn spec(kind: SyntheticKind, fillers: usize) -> SyntheticSpec {
    SyntheticSpec {
        kind,
        num_classes: 4,
        examples_per_class: 200,
        vocab: VocabParams { variant: 0, filler_words: fillers },
        seed: 17,
    }
}

#[test]
fn files_round_trip_with_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = gen_synthetic(&spec(SyntheticKind::Connective, 1)).unwrap();
    for (file, fmt) in [("d.jsonl", DatasetFormat::Jsonl), ("d.tsv", DatasetFormat::Tsv)] {
        let path = tmp.path().join(file);
        save_dataset(&ds, &path, fmt).unwrap();
        assert!(sidecar_path(&path).is_file());
        assert_eq!(DatasetFormat::from_path(&path), fmt);
        let back = load_dataset(&path, fmt).unwrap();
        assert_eq!(back.examples, ds.examples);
        assert_eq!(back.class_names, ds.class_names);
        assert_eq!(back.lineage_fingerprint(), ds.lineage_fingerprint());
    }
}

#[test]
fn missing_sidecar_falls_back_to_numeric_names() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("plain.tsv");
    fs::write(&path, "first text\t0\nsecond\t2\n").unwrap();
    let ds = load_dataset(&path, DatasetFormat::Tsv).unwrap();
    assert_eq!(ds.class_names, ["0", "1", "2"]);
    assert_eq!(ds.name, "plain");
}

#[test]
fn bad_line_reports_its_number() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.jsonl");
    fs::write(&path, "{\"text\": \"a\", \"label\": 0}\n\n{\"text\": 3}\n").unwrap();
    match load_dataset(&path, DatasetFormat::Jsonl) {
        Err(KsodError::Parse { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sentiment_markers_carry_the_label() {
    let ds = gen_synthetic(&spec(SyntheticKind::SentimentLike, 2)).unwrap();
    let correct = ds
        .examples
        .iter()
        .filter(|e| marker_count_predict(&e.text, 4) == e.label)
        .count();
    let acc = correct as f64 / ds.len() as f64;
    assert!(acc >= 0.95, "marker oracle accuracy {acc}");
}

#[test]
fn noise_texts_carry_no_label() {
    let ds = gen_synthetic(&spec(SyntheticKind::Noise, 2)).unwrap();
    // every text draws from the same pool regardless of class, so no
    // marker word ever appears
    let hits = ds
        .examples
        .iter()
        .filter(|e| marker_count_predict(&e.text, 4) == e.label)
        .count();
    assert_eq!(hits, ds.len() / 4);
    let counts = ksod::datahub::balance_check(&ds).counts;
    assert_eq!(counts, vec![200; 4]);
}

#[test]
fn connective_variants_use_disjoint_cues() {
    let words = |variant| {
        let mut s = spec(SyntheticKind::Connective, 0);
        s.vocab.variant = variant;
        let ds = gen_synthetic(&s).unwrap();
        let mut w: Vec<String> = ds
            .examples
            .iter()
            .flat_map(|e| e.text.replace('.', "").split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        w.sort();
        w.dedup();
        w
    };
    let v0 = words(0);
    let v1 = words(1);
    let shared: Vec<&String> = v0.iter().filter(|w| v1.contains(w)).collect();
    // only subjects and the copula are shared
    assert!(shared.iter().all(|w| w.len() == 3), "{shared:?}");
}

#[test]
fn generation_is_seed_deterministic() {
    let a = gen_synthetic(&spec(SyntheticKind::SentimentLike, 1)).unwrap();
    let b = gen_synthetic(&spec(SyntheticKind::SentimentLike, 1)).unwrap();
    assert_eq!(a.examples, b.examples);
    let mut other = spec(SyntheticKind::SentimentLike, 1);
    other.seed += 1;
    assert_ne!(gen_synthetic(&other).unwrap().examples, a.examples);
}
