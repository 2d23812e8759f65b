//! Synthetic corpus where word choice must stay consistent across a document.
//!
//! Every concept has one source word and two interchangeable target
//! synonyms. A document picks one concept and one synonym and keeps it in
//! every sentence. Only the first source sentence uses a marked form of the
//! source word that reveals the choice, so later sentences are ambiguous in
//! isolation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{doc_id, Document, DocumentCorpus, Sentence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Concept {
    pub source: String,
    pub variants: [String; 2],
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lexicon {
    pub concepts: Vec<Concept>,
}

impl Lexicon {
    /// `source TAB variant_a TAB variant_b` per line.
    pub fn to_tsv(&self) -> String {
        self.concepts
            .iter()
            .map(|c| format!("{}\t{}\t{}\n", c.source, c.variants[0], c.variants[1]))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut concepts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').map(str::trim).collect();
            if f.len() != 3 || f.iter().any(|x| x.is_empty()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected source<TAB>variant_a<TAB>variant_b".into(),
                });
            }
            concepts.push(Concept {
                source: f[0].into(),
                variants: [f[1].into(), f[2].into()],
            });
        }
        Ok(Lexicon { concepts })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthConfig {
    pub n_docs: usize,
    pub doc_len: usize,
    pub n_concepts: usize,
    pub seed: u64,
    /// Use a synonym-specific source form in the first sentence.
    pub cue: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 200,
            doc_len: 4,
            n_concepts: 10,
            seed: 0,
            cue: true,
        }
    }
}

/// Concept and synonym chosen for each document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthMeta {
    pub lexicon: Lexicon,
    pub assignments: Vec<(usize, usize)>,
}

impl SynthMeta {
    /// Share of documents using the first synonym, per concept.
    pub fn variant_balance(&self) -> Vec<f64> {
        let mut counts = vec![(0usize, 0usize); self.lexicon.concepts.len()];
        for &(c, v) in &self.assignments {
            counts[c].0 += usize::from(v == 0);
            counts[c].1 += 1;
        }
        counts
            .into_iter()
            .map(|(a, n)| if n == 0 { 0.5 } else { a as f64 / n as f64 })
            .collect()
    }
}

const SYNONYMS: [(&str, &str, &str); 12] = [
    ("tokei", "watch", "clock"),
    ("hato", "pigeon", "dove"),
    ("ryou", "amount", "quantity"),
    ("eiga", "film", "movie"),
    ("kuruma", "car", "automobile"),
    ("isha", "doctor", "physician"),
    ("mise", "shop", "store"),
    ("michi", "road", "street"),
    ("kodomo", "child", "kid"),
    ("sofa", "sofa", "couch"),
    ("kaban", "bag", "satchel"),
    ("shigoto", "job", "occupation"),
];
const CUES: [&str; 2] = ["yo", "ne"];
const ADJECTIVES: [(&str, &str); 8] = [
    ("ii", "good"),
    ("furui", "old"),
    ("atarashii", "new"),
    ("ookii", "big"),
    ("chiisai", "small"),
    ("akai", "red"),
    ("shiroi", "white"),
    ("kireina", "clean"),
];
const VERBS: [(&str, &str); 4] = [
    ("mimasu", "see"),
    ("kaimasu", "buy"),
    ("urimasu", "sell"),
    ("naoshimasu", "fix"),
];
const PAST_VERBS: [(&str, &str); 4] = [
    ("mimashita", "saw"),
    ("kaimashita", "bought"),
    ("urimashita", "sold"),
    ("naoshimashita", "fixed"),
];
const NAMES: [&str; 5] = ["tanaka", "suzuki", "sato", "yamada", "kato"];
/// Source and target frames. Slots: N concept, A adjective, V verb,
/// P past verb, M name.
const TEMPLATES: [(&str, &str); 6] = [
    ("anata wa A N o motte imasu .", "you have a A N ."),
    ("sono N wa A desu .", "the N is A ."),
    ("watashi wa N o V .", "i V the N ."),
    ("M san no N wa A desu .", "M 's N is A ."),
    ("kinou N o P .", "yesterday i P the N ."),
    ("N wa doko desu ka ?", "where is the N ?"),
];

/// First-mention source form that names the synonym, e.g. `tokei-yo`.
pub fn marked_source(concept: &Concept, variant: usize) -> String {
    format!("{}-{}", concept.source, CUES[variant])
}

fn letters(mut k: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (k % 26) as u8);
        k /= 26;
        if k == 0 {
            break;
        }
        k -= 1;
    }
    s.reverse();
    String::from_utf8(s).unwrap()
}

pub fn lexicon(n_concepts: usize) -> Lexicon {
    let concepts = (0..n_concepts)
        .map(|k| match SYNONYMS.get(k) {
            Some(&(s, a, b)) => Concept {
                source: s.into(),
                variants: [a.into(), b.into()],
            },
            None => {
                let tag = letters(k - SYNONYMS.len());
                Concept {
                    source: format!("mono{tag}"),
                    variants: [format!("wug{tag}"), format!("blick{tag}")],
                }
            }
        })
        .collect();
    Lexicon { concepts }
}

/// Balanced (concept, variant) draws: every concept gets `n_docs /
/// n_concepts` documents (the remainder spread at random), split evenly
/// between its two synonyms, and the list is shuffled.
fn assignments(rng: &mut ChaCha8Rng, n_docs: usize, n_concepts: usize) -> Vec<(usize, usize)> {
    let mut concept_order: Vec<usize> = (0..n_concepts).collect();
    concept_order.shuffle(rng);
    let mut out = Vec::with_capacity(n_docs);
    for (rank, &c) in concept_order.iter().enumerate() {
        let count = n_docs / n_concepts + usize::from(rank < n_docs % n_concepts);
        let first = rng.gen_range(0..2);
        for i in 0..count {
            out.push((c, (first + i) % 2));
        }
    }
    out.shuffle(rng);
    out
}

fn render(frame: &str, fill: &dyn Fn(char) -> String) -> Sentence {
    frame
        .split(' ')
        .map(|w| match w {
            "N" | "A" | "V" | "P" | "M" => fill(w.chars().next().unwrap()),
            _ => w.to_string(),
        })
        .collect()
}

/// Deterministic in `cfg`.
pub fn generate(cfg: &SynthConfig) -> (DocumentCorpus, SynthMeta) {
    assert!(cfg.n_concepts >= 2 && cfg.doc_len >= 2, "need at least two concepts and two sentences");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = lexicon(cfg.n_concepts);
    let assignments = assignments(&mut rng, cfg.n_docs, cfg.n_concepts);
    let mut documents = Vec::with_capacity(cfg.n_docs);
    for (d, &(c, v)) in assignments.iter().enumerate() {
        let concept = &lexicon.concepts[c];
        let mut source = Vec::with_capacity(cfg.doc_len);
        let mut target = Vec::with_capacity(cfg.doc_len);
        for k in 0..cfg.doc_len {
            let (sf, tf) = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
            let adj = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
            let verb = VERBS[rng.gen_range(0..VERBS.len())];
            let past = PAST_VERBS[rng.gen_range(0..PAST_VERBS.len())];
            let name = NAMES[rng.gen_range(0..NAMES.len())];
            let mut src = render(sf, &|slot| {
                match slot {
                    'N' => concept.source.as_str(),
                    'A' => adj.0,
                    'V' => verb.0,
                    'P' => past.0,
                    _ => name,
                }
                .to_string()
            });
            let tgt = render(tf, &|slot| {
                match slot {
                    'N' => concept.variants[v].as_str(),
                    'A' => adj.1,
                    'V' => verb.1,
                    'P' => past.1,
                    _ => name,
                }
                .to_string()
            });
            if k == 0 && cfg.cue {
                let at = src.iter().position(|t| *t == concept.source).expect("every frame names the concept");
                src[at] = marked_source(concept, v);
            }
            source.push(src);
            target.push(tgt);
        }
        documents.push(Document {
            id: doc_id(d),
            source,
            target,
        });
    }
    (
        DocumentCorpus { documents },
        SynthMeta {
            lexicon,
            assignments,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            seed: 42,
            ..SynthConfig::default()
        };
        assert_eq!(generate(&cfg), generate(&cfg));
        let other = SynthConfig { seed: 43, ..cfg.clone() };
        assert_ne!(generate(&cfg).0, generate(&other).0);
    }

    #[test]
    fn one_variant_per_document() {
        let (corpus, meta) = generate(&SynthConfig::default());
        corpus.validate().unwrap();
        for (doc, &(c, v)) in corpus.documents.iter().zip(&meta.assignments) {
            let concept = &meta.lexicon.concepts[c];
            for s in &doc.target {
                assert_eq!(s.iter().filter(|t| **t == concept.variants[v]).count(), 1);
                assert!(!s.contains(&concept.variants[1 - v]));
            }
            assert!(doc.source[0].contains(&marked_source(concept, v)));
            assert!(!doc.source[0].contains(&concept.source));
            assert!(doc.source[1..].iter().all(|s| s.contains(&concept.source)));
        }
    }

    #[test]
    fn variants_are_balanced() {
        for seed in 0..5 {
            let (_, meta) = generate(&SynthConfig {
                seed,
                ..SynthConfig::default()
            });
            for r in meta.variant_balance() {
                assert!((0.4..=0.6).contains(&r), "{r}");
            }
        }
    }

    #[test]
    fn generated_concepts_beyond_the_list() {
        let lex = lexicon(40);
        assert_eq!(lex.concepts[12].source, "monoa");
        assert_eq!(lex.concepts[38].variants[0], "wugaa");
        let mut sources: Vec<&String> = lex.concepts.iter().map(|c| &c.source).collect();
        sources.dedup();
        assert_eq!(sources.len(), 40);
    }

    #[test]
    fn lexicon_tsv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lex.tsv");
        let lex = lexicon(3);
        lex.save(&path).unwrap();
        assert_eq!(Lexicon::load(&path).unwrap(), lex);
    }
}
