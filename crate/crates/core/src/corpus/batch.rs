use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DocumentCorpus, Sentence};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Shuffled independent sentence pairs.
    Sentence,
    /// Previous sentence, separator, current sentence on both sides.
    TwoToTwo,
    /// Original order with document boundaries marked.
    DocumentOrdered,
}

/// One numericalized sentence pair. Targets carry neither BOS nor EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
    pub doc: usize,
    pub position: usize,
    /// First sentence of its document.
    pub doc_start: bool,
}

impl Example {
    /// Decoder outputs, including the final EOS.
    pub fn target_tokens(&self) -> usize {
        self.tgt.len() + 1
    }
}

pub type Batch = Vec<Example>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSet {
    pub batches: Vec<Batch>,
    /// Sides cut down to `max_len`.
    pub truncated: usize,
}

impl BatchSet {
    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.batches.iter().flatten()
    }
}

/// Numericalizes and packs a corpus into batches of at most `max_tokens`
/// target tokens. Shuffling uses `seed`; document-ordered mode ignores it.
pub fn make_batches(
    corpus: &DocumentCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    mode: BatchMode,
    max_tokens: usize,
    max_len: usize,
    seed: u64,
) -> Result<BatchSet> {
    if max_len == 0 || max_tokens < max_len + 1 {
        return Err(Error::Config(format!(
            "max_tokens {max_tokens} must cover one sentence of max_len {max_len} plus EOS"
        )));
    }
    let seps = match mode {
        BatchMode::TwoToTwo => Some((
            src_vocab.sep_id().ok_or_else(|| Error::Config("source vocabulary has no separator".into()))?,
            tgt_vocab.sep_id().ok_or_else(|| Error::Config("target vocabulary has no separator".into()))?,
        )),
        _ => None,
    };
    let mut truncated = 0;
    let mut clip = |mut ids: Vec<TokenId>| {
        if ids.len() > max_len {
            ids.truncate(max_len);
            truncated += 1;
        }
        ids
    };
    let join = |prev: &Sentence, cur: &Sentence, vocab: &Vocabulary, sep: TokenId| {
        let mut ids = vocab.encode(prev);
        ids.push(sep);
        ids.extend(vocab.encode(cur));
        ids
    };
    let mut examples = Vec::with_capacity(corpus.num_sentences());
    for (d, doc) in corpus.documents.iter().enumerate() {
        for k in 0..doc.len() {
            let (src, tgt) = match (seps, k) {
                (Some((ss, ts)), k) if k > 0 => (
                    join(&doc.source[k - 1], &doc.source[k], src_vocab, ss),
                    join(&doc.target[k - 1], &doc.target[k], tgt_vocab, ts),
                ),
                _ => (src_vocab.encode(&doc.source[k]), tgt_vocab.encode(&doc.target[k])),
            };
            examples.push(Example {
                src: clip(src),
                tgt: clip(tgt),
                doc: d,
                position: k,
                doc_start: k == 0,
            });
        }
    }
    if truncated > 0 {
        log::warn!("{truncated} sentence sides truncated to {max_len} tokens");
    }
    if mode != BatchMode::DocumentOrdered {
        examples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut batches = Vec::new();
    let mut current: Batch = Vec::new();
    let mut tokens = 0;
    for ex in examples {
        let n = ex.target_tokens();
        if !current.is_empty() && tokens + n > max_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        tokens += n;
        current.push(ex);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(BatchSet { batches, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate, SynthConfig};
    use crate::corpus::{build_vocab, parse_corpus, Side};
    use std::path::Path;

    fn vocabs(c: &DocumentCorpus) -> (Vocabulary, Vocabulary) {
        let mut s = build_vocab(c, Side::Source, 1000, 1).unwrap();
        let mut t = build_vocab(c, Side::Target, 1000, 1).unwrap();
        s.add_separator();
        t.add_separator();
        (s, t)
    }

    #[test]
    fn two_to_two_concatenates_previous() {
        let c = parse_corpus("a\nb\n", "x\ny\n", (Path::new("s"), Path::new("t"))).unwrap();
        let (sv, tv) = vocabs(&c);
        let set = make_batches(&c, &sv, &tv, BatchMode::TwoToTwo, 100, 10, 0).unwrap();
        let mut ex: Vec<&Example> = set.examples().collect();
        ex.sort_by_key(|e| e.position);
        assert_eq!(sv.decode(&ex[0].src), ["a"]);
        assert_eq!(sv.decode(&ex[1].src), ["a", "<sep>", "b"]);
        assert_eq!(tv.decode(&ex[1].tgt), ["x", "<sep>", "y"]);
    }

    #[test]
    fn document_order_and_flags() {
        let c = parse_corpus("a\nb\n\nc\n", "x\ny\n\nz\n", (Path::new("s"), Path::new("t"))).unwrap();
        let (sv, tv) = vocabs(&c);
        let set = make_batches(&c, &sv, &tv, BatchMode::DocumentOrdered, 3, 2, 0).unwrap();
        let order: Vec<(usize, usize, bool)> = set.examples().map(|e| (e.doc, e.position, e.doc_start)).collect();
        assert_eq!(order, [(0, 0, true), (0, 1, false), (1, 0, true)]);
    }

    #[test]
    fn no_batch_exceeds_token_budget() {
        let (c, _) = generate(&SynthConfig {
            n_docs: 60,
            ..SynthConfig::default()
        });
        let (sv, tv) = vocabs(&c);
        for mode in [BatchMode::Sentence, BatchMode::TwoToTwo, BatchMode::DocumentOrdered] {
            for max_tokens in [20, 64, 200] {
                let set = make_batches(&c, &sv, &tv, mode, max_tokens, 19, 3).unwrap();
                assert_eq!(set.examples().count(), c.num_sentences());
                for b in &set.batches {
                    assert!(!b.is_empty());
                    assert!(b.iter().map(Example::target_tokens).sum::<usize>() <= max_tokens);
                }
            }
        }
    }

    #[test]
    fn truncation_is_counted() {
        let c = parse_corpus("a b c d\n", "x y z\n", (Path::new("s"), Path::new("t"))).unwrap();
        let (sv, tv) = vocabs(&c);
        let set = make_batches(&c, &sv, &tv, BatchMode::Sentence, 10, 2, 0).unwrap();
        assert_eq!(set.truncated, 2);
        assert_eq!(set.batches[0][0].src.len(), 2);
        assert!(make_batches(&c, &sv, &tv, BatchMode::Sentence, 2, 2, 0).is_err());
    }
}
