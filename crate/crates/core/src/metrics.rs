//! Corpus BLEU-4, the stem-repetition lexical cohesion score (LC-stem), and
//! a consistency rate for the synthetic synonym corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::synth::Lexicon;
use crate::corpus::Sentence;
use crate::error::{Error, Result};

/// Shipped stopword list. Tokens made only of digits or punctuation are
/// filtered too.
pub const STOPWORDS_V1: &str = include_str!("../data/stopwords-en-v1.txt");

fn stopwords() -> &'static BTreeSet<&'static str> {
    static SET: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS_V1
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with("# "))
            .collect()
    })
}

/// Hex SHA-256 of the stopword file, embedded in every report.
pub fn stopwords_sha256() -> String {
    hex::encode(Sha256::digest(STOPWORDS_V1.as_bytes()))
}

pub fn is_stopword(token: &str) -> bool {
    let lower = token.to_lowercase();
    stopwords().contains(lower.as_str()) || !lower.chars().any(char::is_alphabetic)
}

pub fn content_words(tokens: &[String]) -> Vec<String> {
    tokens.iter().filter(|t| !is_stopword(t)).cloned().collect()
}

/// Ordered suffix rules; the first one that applies wins, and only if at
/// least three characters remain.
pub const STEM_RULES: [(&str, &str); 8] = [
    ("sses", "ss"),
    ("ies", "y"),
    ("edly", ""),
    ("ing", ""),
    ("ed", ""),
    ("ly", ""),
    ("es", ""),
    ("s", ""),
];

/// Lowercases and strips one suffix. `es` is removed only after a sibilant
/// (`boxes`, `wishes`); `s` is kept after `s`, `u` and `i` (`glass`, `bus`,
/// `axis`).
pub fn stem(token: &str) -> String {
    let w = token.to_lowercase();
    for (suffix, replacement) in STEM_RULES {
        let Some(base) = w.strip_suffix(suffix) else {
            continue;
        };
        let applies = match suffix {
            "es" => ["s", "x", "z", "ch", "sh"].iter().any(|e| base.ends_with(e)),
            "s" => !(base.ends_with('s') || base.ends_with('u') || base.ends_with('i')),
            _ => true,
        };
        if applies && base.chars().count() + replacement.chars().count() >= 3 {
            return format!("{base}{replacement}");
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcReport {
    /// `None` for documents without content words.
    pub per_document: Vec<Option<f64>>,
    /// Pooled over all documents, in percent.
    pub corpus: f64,
    pub content_words: usize,
    pub devices: usize,
    pub excluded_documents: usize,
    /// `corpus - reference corpus`, when a reference was scored.
    pub delta_vs_reference: Option<f64>,
    pub stopwords_sha256: String,
}

/// Cohesion devices and content words of one document: a content word is a
/// device when its stem matches the stem of an earlier content word.
pub fn document_devices(doc: &[Sentence]) -> (usize, usize) {
    let mut seen = BTreeSet::new();
    let (mut devices, mut content) = (0, 0);
    for tok in doc.iter().flatten().filter(|t| !is_stopword(t)) {
        content += 1;
        if !seen.insert(stem(tok)) {
            devices += 1;
        }
    }
    (devices, content)
}

pub fn lc_score(docs: &[Vec<Sentence>]) -> Result<LcReport> {
    if docs.is_empty() {
        return Err(Error::contract("LC needs at least one document"));
    }
    let mut per_document = Vec::with_capacity(docs.len());
    let (mut devices, mut content, mut excluded) = (0, 0, 0);
    for (i, doc) in docs.iter().enumerate() {
        let (d, c) = document_devices(doc);
        if c == 0 {
            log::warn!("document {} has no content words; excluded from LC", i + 1);
            excluded += 1;
            per_document.push(None);
            continue;
        }
        devices += d;
        content += c;
        per_document.push(Some(100.0 * d as f64 / c as f64));
    }
    let corpus = if content == 0 { 0.0 } else { 100.0 * devices as f64 / content as f64 };
    Ok(LcReport {
        per_document,
        corpus,
        content_words: content,
        devices,
        excluded_documents: excluded,
        delta_vs_reference: None,
        stopwords_sha256: stopwords_sha256(),
    })
}

/// LC of `candidate` with its difference to the reference's LC.
pub fn lc_against_reference(candidate: &[Vec<Sentence>], reference: &[Vec<Sentence>]) -> Result<(LcReport, LcReport)> {
    let mut cand = lc_score(candidate)?;
    let reference = lc_score(reference)?;
    cand.delta_vs_reference = Some(cand.corpus - reference.corpus);
    Ok((cand, reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds one to matches and totals for orders above one.
    AddOne,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub candidate_len: usize,
    pub reference_len: usize,
    pub brevity_penalty: f64,
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// Corpus-level BLEU-4 over aligned sentence pairs.
pub fn bleu4_sentences(candidates: &[Sentence], references: &[Sentence], smoothing: Smoothing) -> Result<BleuReport> {
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "BLEU needs aligned corpora: {} candidate and {} reference sentences",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=4 {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    let brevity_penalty = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut log_sum = 0.0;
    let mut zero = c_len == 0;
    for n in 0..4 {
        let (m, t) = match (smoothing, n) {
            (Smoothing::AddOne, n) if n > 0 => (matches[n] + 1, totals[n] + 1),
            _ => (matches[n], totals[n]),
        };
        if m == 0 || t == 0 {
            zero = true;
            break;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    if c_len == 0 {
        log::warn!("empty candidate corpus; BLEU is 0");
    }
    let score = if zero { 0.0 } else { 100.0 * brevity_penalty * (log_sum / 4.0).exp() };
    Ok(BleuReport {
        score,
        matches,
        totals,
        candidate_len: c_len,
        reference_len: r_len,
        brevity_penalty,
    })
}

/// Document-aligned BLEU-4; documents must have matching sentence counts.
pub fn bleu4(candidates: &[Vec<Sentence>], references: &[Vec<Sentence>], smoothing: Smoothing) -> Result<BleuReport> {
    if candidates.len() != references.len() || candidates.iter().zip(references).any(|(c, r)| c.len() != r.len()) {
        return Err(Error::contract("BLEU needs documents with matching sentence counts"));
    }
    let flat = |d: &[Vec<Sentence>]| d.iter().flatten().cloned().collect::<Vec<_>>();
    bleu4_sentences(&flat(candidates), &flat(references), smoothing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    /// `matched / compared`, 0 when nothing was compared.
    pub rate: f64,
    pub matched: usize,
    pub compared: usize,
    /// Follow-up sentences with neither synonym, or whose document has no
    /// synonym in its first sentence.
    pub dropped: usize,
}

/// First synonym of `concept` in a sentence, as 0 or 1.
fn variant_in(sentence: &[String], lexicon: &Lexicon, concept: usize) -> Option<usize> {
    let c = &lexicon.concepts[concept];
    sentence.iter().find_map(|t| c.variants.iter().position(|v| v == t))
}

/// The concept whose synonyms occur most often in a document, lowest index
/// on ties.
fn document_concept(doc: &[Sentence], lexicon: &Lexicon) -> Option<usize> {
    let mut hits: BTreeMap<usize, usize> = BTreeMap::new();
    for tok in doc.iter().flatten() {
        for (i, c) in lexicon.concepts.iter().enumerate() {
            if c.variants.contains(tok) {
                *hits.entry(i).or_default() += 1;
            }
        }
    }
    let max = *hits.values().max()?;
    hits.into_iter().find(|&(_, n)| n == max).map(|(i, _)| i)
}

/// Share of sentences 2..L whose synonym matches the one chosen in sentence
/// 1 of the same document.
pub fn consistency_rate(docs: &[Vec<Sentence>], lexicon: &Lexicon) -> ConsistencyReport {
    let (mut matched, mut compared, mut dropped) = (0, 0, 0);
    for doc in docs {
        let follow_ups = doc.len().saturating_sub(1);
        let Some(concept) = document_concept(doc, lexicon) else {
            dropped += follow_ups;
            continue;
        };
        let Some(anchor) = doc.first().and_then(|s| variant_in(s, lexicon, concept)) else {
            dropped += follow_ups;
            continue;
        };
        for s in &doc[1..] {
            match variant_in(s, lexicon, concept) {
                Some(v) => {
                    compared += 1;
                    matched += usize::from(v == anchor);
                }
                None => dropped += 1,
            }
        }
    }
    let rate = if compared == 0 { 0.0 } else { matched as f64 / compared as f64 };
    ConsistencyReport {
        rate,
        matched,
        compared,
        dropped,
    }
}
