use std::path::PathBuf;

use dialplan_core::corpus::{derive_training_views, load_corpus};
use dialplan_core::linearize::{linearize_session, LinearizationScheme, Tokenizer, TokenType};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn golden() -> Vec<(String, u32, u8, bool)> {
    std::fs::read_to_string(fixture("fig_golden.tsv"))
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3] == "1")
        })
        .collect()
}

#[test]
fn two_turn_dialogue_matches_golden_arrays() {
    let sessions = load_corpus(fixture("fig_session.jsonl")).unwrap();
    let tk = Tokenizer::load(fixture("fig_vocab.txt")).unwrap();
    let [view, _] = derive_training_views(&sessions[0]).unwrap();
    let ex = linearize_session(&view, &LinearizationScheme::default(), &tk).unwrap();

    let rows = golden();
    let ids: Vec<u32> = rows.iter().map(|r| r.1).collect();
    let types: Vec<u8> = rows.iter().map(|r| r.2).collect();
    let mask: Vec<bool> = rows.iter().map(|r| r.3).collect();
    let got_types: Vec<u8> = ex.token_type_ids.iter().map(|&t| t as u8).collect();
    assert_eq!(ex.token_ids, ids);
    assert_eq!(got_types, types);
    assert_eq!(ex.loss_mask, mask);
    for (row, &id) in rows.iter().zip(&ex.token_ids) {
        assert_eq!(tk.token(id), row.0);
    }
}

#[test]
fn built_vocabulary_gives_identical_types_and_mask() {
    // ids depend on the vocabulary; types and mask must not
    let sessions = load_corpus(fixture("fig_session.jsonl")).unwrap();
    let tk = Tokenizer::from_corpus(&sessions);
    let [view, _] = derive_training_views(&sessions[0]).unwrap();
    let ex = linearize_session(&view, &LinearizationScheme::default(), &tk).unwrap();
    let rows = golden();
    let tokens: Vec<&str> = ex.token_ids.iter().map(|&i| tk.token(i)).collect();
    assert_eq!(tokens, rows.iter().map(|r| r.0.as_str()).collect::<Vec<_>>());
    assert_eq!(ex.token_type_ids[0], TokenType::Context);
    assert_eq!(ex.loss_mask, rows.iter().map(|r| r.3).collect::<Vec<_>>());
}
