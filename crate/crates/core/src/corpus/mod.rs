//! Document-structured parallel corpora.
//!
//! Files hold one pre-tokenized sentence per line with a blank line between
//! documents; source and target files must agree line for line.

mod batch;
pub mod synth;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub use batch::{make_batches, Batch, BatchMode, BatchSet, Example};

pub type Sentence = Vec<String>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub source: Vec<Sentence>,
    pub target: Vec<Sentence>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DocumentCorpus {
    pub documents: Vec<Document>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

impl DocumentCorpus {
    pub fn num_sentences(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    pub fn side(&self, side: Side) -> impl Iterator<Item = &[Sentence]> {
        self.documents.iter().map(move |d| match side {
            Side::Source => d.source.as_slice(),
            Side::Target => d.target.as_slice(),
        })
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        for d in &self.documents {
            if d.source.len() != d.target.len() {
                return Err(Error::contract(format!(
                    "document {} has {} source and {} target sentences",
                    d.id,
                    d.source.len(),
                    d.target.len()
                )));
            }
            if d.is_empty() {
                return Err(Error::contract(format!("document {} is empty", d.id)));
            }
            let bad = d.source.iter().chain(&d.target).any(|s| {
                s.is_empty() || s.iter().any(|t| t.is_empty() || t.chars().any(char::is_whitespace))
            });
            if bad {
                return Err(Error::contract(format!(
                    "document {} has an empty sentence or a token with whitespace",
                    d.id
                )));
            }
        }
        Ok(())
    }
}

pub fn doc_id(index: usize) -> String {
    format!("doc{:05}", index + 1)
}

/// Splits one side's text into documents of tokenized sentences, each line
/// tagged with its 1-based line number.
fn split_documents(text: &str) -> Vec<Vec<(usize, Sentence)>> {
    let mut docs = Vec::new();
    let mut current = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Sentence = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            current.push((i + 1, tokens));
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Parses aligned source and target text. `paths` are only used in error
/// messages.
pub fn parse_corpus(src: &str, tgt: &str, paths: (&Path, &Path)) -> Result<DocumentCorpus> {
    let err = |path: &Path, line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let src_lines: Vec<&str> = src.lines().collect();
    let tgt_lines: Vec<&str> = tgt.lines().collect();
    // Boundaries must sit on the same lines in both files.
    for (i, (a, b)) in src_lines.iter().zip(&tgt_lines).enumerate() {
        let (ea, eb) = (a.trim().is_empty(), b.trim().is_empty());
        if ea != eb {
            let which = if ea { "source" } else { "target" };
            return Err(err(
                paths.1,
                i + 1,
                format!("document boundary in {which} only"),
            ));
        }
    }
    let content = |lines: &[&str]| lines.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |p| p + 1);
    let (ns, nt) = (content(&src_lines), content(&tgt_lines));
    if ns != nt {
        return Err(err(
            paths.1,
            ns.min(nt) + 1,
            format!("source has {ns} lines but target has {nt}"),
        ));
    }
    let src_docs = split_documents(src);
    let tgt_docs = split_documents(tgt);
    if src_docs.is_empty() {
        return Err(err(paths.0, 1, "corpus has no sentences".into()));
    }
    let documents = src_docs
        .into_iter()
        .zip(tgt_docs)
        .enumerate()
        .map(|(i, (s, t))| Document {
            id: doc_id(i),
            source: s.into_iter().map(|(_, x)| x).collect(),
            target: t.into_iter().map(|(_, x)| x).collect(),
        })
        .collect();
    Ok(DocumentCorpus { documents })
}

pub fn load_corpus(src: &Path, tgt: &Path) -> Result<DocumentCorpus> {
    let s = fs::read_to_string(src)?;
    let t = fs::read_to_string(tgt)?;
    parse_corpus(&s, &t, (src, tgt))
}

/// One sentence per line, blank line between documents.
pub fn format_side(docs: &[Vec<Sentence>]) -> String {
    let mut out = String::new();
    for (i, doc) in docs.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for s in doc {
            out.push_str(&s.join(" "));
            out.push('\n');
        }
    }
    out
}

pub fn write_corpus(corpus: &DocumentCorpus, src: &Path, tgt: &Path) -> Result<()> {
    let sides = |side| corpus.side(side).map(<[Sentence]>::to_vec).collect::<Vec<_>>();
    fs::write(src, format_side(&sides(Side::Source)))?;
    fs::write(tgt, format_side(&sides(Side::Target)))?;
    Ok(())
}

/// `doc_id TAB start_line TAB end_line`, 1-based inclusive line numbers in
/// the written corpus files.
pub fn manifest(corpus: &DocumentCorpus) -> String {
    let mut out = String::new();
    let mut line = 1;
    for d in &corpus.documents {
        let end = line + d.len() - 1;
        out.push_str(&format!("{}\t{}\t{}\n", d.id, line, end));
        line = end + 2;
    }
    out
}

/// Vocabulary over one side of the corpus.
pub fn build_vocab(corpus: &DocumentCorpus, side: Side, max_size: usize, min_freq: usize) -> Result<Vocabulary> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for doc in corpus.side(side) {
        for tok in doc.iter().flatten() {
            *counts.entry(tok.clone()).or_default() += 1;
        }
    }
    Vocabulary::from_counts(&counts, max_size, min_freq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> &Path {
        Path::new(s)
    }

    const SRC: &str = "a b\nc\n\nd e\nf\ng h i\n";
    const TGT: &str = "A B\nC\n\nD E\nF\nG H I\n";

    #[test]
    fn two_documents() {
        let c = parse_corpus(SRC, TGT, (p("s"), p("t"))).unwrap();
        let sizes: Vec<usize> = c.documents.iter().map(Document::len).collect();
        assert_eq!(sizes, [2, 3]);
        assert_eq!(c.documents[1].target[2], ["G", "H", "I"]);
        c.validate().unwrap();
        assert_eq!(manifest(&c), "doc00001\t1\t2\ndoc00002\t4\t6\n");
    }

    #[test]
    fn crlf_matches_lf() {
        let a = parse_corpus(SRC, TGT, (p("s"), p("t"))).unwrap();
        let b = parse_corpus(&SRC.replace('\n', "\r\n"), &TGT.replace('\n', "\r\n"), (p("s"), p("t"))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn boundary_mismatch_names_line() {
        let src = "a\nb\nc\nd\ne\nf\n\ng\n";
        let tgt = "a\nb\nc\nd\ne\nf\ng\n\n";
        let e = parse_corpus(src, tgt, (p("s"), p("t"))).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 7, .. }), "{e}");
        assert!(e.to_string().starts_with("t:7:"));
    }

    #[test]
    fn count_mismatch_and_empty() {
        let e = parse_corpus("a\nb\n", "a\n", (p("s"), p("t"))).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(parse_corpus("", "", (p("s"), p("t"))).is_err());
        assert!(parse_corpus("\n\n", "\n\n", (p("s"), p("t"))).is_err());
    }

    #[test]
    fn format_roundtrip() {
        let c = parse_corpus(SRC, TGT, (p("s"), p("t"))).unwrap();
        let docs: Vec<Vec<Sentence>> = c.side(Side::Source).map(<[Sentence]>::to_vec).collect();
        assert_eq!(format_side(&docs), SRC);
    }

    #[test]
    fn vocab_from_corpus() {
        let c = parse_corpus("a a b\n", "x\n", (p("s"), p("t"))).unwrap();
        let v = build_vocab(&c, Side::Source, 10, 1).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (4, 5));
    }
}
