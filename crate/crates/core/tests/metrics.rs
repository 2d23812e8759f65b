use std::fs;
use std::path::{Path, PathBuf};

use lexcopy::corpus::{parse_corpus, Sentence};
use lexcopy::metrics::{bleu4, bleu4_sentences, lc_score, Smoothing};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn lines(name: &str) -> Vec<Sentence> {
    fs::read_to_string(fixture(name))
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

fn documents(name: &str) -> Vec<Vec<Sentence>> {
    let text = fs::read_to_string(fixture(name)).unwrap();
    let path = fixture(name);
    parse_corpus(&text, &text, (&path, &path))
        .unwrap()
        .documents
        .into_iter()
        .map(|d| d.source)
        .collect()
}

#[test]
fn lc_fixture_documents() {
    let docs = documents("lc5.txt");
    assert_eq!(docs.len(), 5);
    let r = lc_score(&docs).unwrap();
    assert_eq!(r.per_document, vec![Some(25.0), Some(37.5), Some(0.0), Some(75.0), None]);
    assert_eq!((r.devices, r.content_words, r.excluded_documents), (7, 20, 1));
    assert_eq!(r.corpus, 35.0);
}

#[test]
fn bleu_fixture_matches_reference_implementation() {
    let hyp = lines("bleu20.hyp");
    let refs = lines("bleu20.ref");
    assert_eq!(hyp.len(), 20);
    let r = bleu4_sentences(&hyp, &refs, Smoothing::None).unwrap();
    assert_eq!(r.matches, [133, 95, 67, 46]);
    assert_eq!(r.totals, [152, 132, 112, 92]);
    assert_eq!((r.candidate_len, r.reference_len), (152, 151));
    assert_eq!(r.brevity_penalty, 1.0);
    assert!((r.score - 65.87886797128984).abs() < 1e-9, "{}", r.score);
    let smoothed = bleu4_sentences(&hyp, &refs, Smoothing::AddOne).unwrap();
    assert!((smoothed.score - 66.20156495046199).abs() < 1e-9, "{}", smoothed.score);
}

#[test]
fn bleu_of_the_reference_is_100() {
    let refs = lines("bleu20.ref");
    let docs: Vec<Vec<Sentence>> = refs.chunks(4).map(<[Sentence]>::to_vec).collect();
    assert_eq!(bleu4(&docs, &docs, Smoothing::None).unwrap().score, 100.0);
}

#[test]
fn bleu_rejects_misaligned_documents() {
    let refs = lines("bleu20.ref");
    let a = vec![refs[..2].to_vec()];
    let b = vec![refs[..3].to_vec()];
    assert!(bleu4(&a, &b, Smoothing::None).is_err());
}
