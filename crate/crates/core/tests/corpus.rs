use catm_core::corpus::{
    build_vocab, load_records, parse_records, split_folds, to_bow, tokenize, write_records, BowCorpus,
    DocumentRecord, TokenizerConfig, VocabConfig,
};
use catm_core::Error;
use proptest::prelude::*;

fn word() -> impl Strategy<Value = String> {
    "[a-e]{2,3}"
}

fn docs() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(word(), 0..12), 1..10)
}

proptest! {
    #[test]
    fn vocab_is_invariant_to_document_order(mut d in docs(), min_count in 1usize..3, max_size in 1usize..20) {
        let a = build_vocab(&d, min_count, max_size);
        d.reverse();
        let b = build_vocab(&d, min_count, max_size);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.tokens(), b.tokens()),
            (Err(Error::EmptyVocabulary), Err(Error::EmptyVocabulary)) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn bow_counts_every_kept_token(d in docs()) {
        if let Ok(vocab) = build_vocab(&d, 1, 1000) {
            for doc in &d {
                let (bow, kept) = to_bow(doc, &vocab);
                prop_assert_eq!(kept as usize, doc.len());
                prop_assert_eq!(bow.total(), kept);
                let mut back: Vec<&str> = bow.tokens().map(|i| vocab.token(i).unwrap()).collect();
                let mut orig: Vec<&str> = doc.iter().map(String::as_str).collect();
                back.sort_unstable();
                orig.sort_unstable();
                prop_assert_eq!(back, orig);
            }
        }
    }

    #[test]
    fn folds_partition_the_units(n in 2usize..200, k in 2usize..10, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let f = split_folds(n, k, seed).unwrap();
        let mut all: Vec<usize> = (0..k).flat_map(|j| f.members(j)).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = (0..k).map(|j| f.members(j).len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for j in 0..k {
            prop_assert_eq!(f.members(j).len() + f.complement(j).len(), n);
        }
        prop_assert_eq!(f, split_folds(n, k, seed).unwrap());
    }

    #[test]
    fn tokens_respect_the_length_floor(text in "[A-Za-z0-9 ,.!]{0,60}", min_len in 1usize..4) {
        for t in tokenize(&text, &TokenizerConfig { min_len }) {
            prop_assert!(t.chars().count() >= min_len);
            prop_assert_eq!(t.to_lowercase(), t.clone());
        }
    }
}

fn records() -> Vec<DocumentRecord> {
    vec![
        DocumentRecord {
            id: "a".into(),
            text: "The cat sat; the cat ran.".into(),
            treatment: 1,
            outcome: Some(2.5),
            strata: Some("x".into()),
        },
        DocumentRecord {
            id: "b".into(),
            text: "A dog ran".into(),
            treatment: 0,
            outcome: None,
            strata: None,
        },
    ]
}

#[test]
fn records_survive_a_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    write_records(&path, &records()).unwrap();
    assert_eq!(load_records(&path).unwrap(), records());
}

#[test]
fn corpus_export_preserves_counts() {
    let c = BowCorpus::from_records(&records(), &TokenizerConfig::default(), &VocabConfig::default()).unwrap();
    let again = BowCorpus::from_records(&c.to_records(), &TokenizerConfig::default(), &VocabConfig::default()).unwrap();
    assert_eq!(c.vocab(), again.vocab());
    for (x, y) in c.docs().iter().zip(again.docs()) {
        assert_eq!(x.counts, y.counts);
    }
    // "a" has fewer than two characters and is dropped
    assert_eq!(c.docs()[1].counts.total(), 2);
}

#[test]
fn parse_errors_name_the_line() {
    let text = "{\"id\":\"a\",\"text\":\"x\",\"treatment\":0}\n\n{\"id\":\"b\",\"text\":\"y\",\"treatment\":2}\n";
    match parse_records(text.as_bytes()) {
        Err(Error::Parse { line: 3, .. }) => {}
        other => panic!("{other:?}"),
    }
    let dup = "{\"id\":\"a\",\"text\":\"x\",\"treatment\":0}\n{\"id\":\"a\",\"text\":\"y\",\"treatment\":1}\n";
    assert!(matches!(parse_records(dup.as_bytes()), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(parse_records("not json\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn missing_file_error_names_the_path() {
    let err = load_records(std::path::Path::new("/definitely/not/here.jsonl")).unwrap_err();
    assert!(err.to_string().contains("/definitely/not/here.jsonl"));
}

#[test]
fn fold_export_lists_every_id() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("folds.csv");
    let f = split_folds(4, 2, 0).unwrap();
    let ids: Vec<String> = ["p", "q", "r", "s"].iter().map(|s| s.to_string()).collect();
    f.write_csv(&path, &ids).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "id,fold");
    assert_eq!(lines.len(), 5);
    assert!(lines[1..].iter().zip(&ids).all(|(l, id)| l.starts_with(&format!("{id},"))));
}
