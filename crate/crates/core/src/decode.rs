//! Document-level inference: greedy and beam search over one sentence at a
//! time, with source and target caches carried across a document.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::context::ContextState;
use crate::error::{Error, Result};
use crate::model::{step_trace, DecoderStepTrace, EncodedSentence, GateOverride, Model};
use crate::params::Session;
use crate::vocab::{TokenId, Vocabulary, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    /// 1 is greedy.
    pub beam: usize,
    /// Exponent on the hypothesis length in `log_prob / len^penalty`.
    pub length_penalty: f64,
    pub gate: GateOverride,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            beam: 1,
            length_penalty: 0.0,
            gate: GateOverride::Learned,
        }
    }
}

/// Output cap: twice the source length plus ten.
pub fn max_output_len(source_len: usize) -> usize {
    2 * source_len + 10
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with the start token.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub step_log_probs: Vec<f64>,
    pub finished: bool,
}

impl Hypothesis {
    pub fn start(token: TokenId) -> Self {
        Hypothesis {
            tokens: vec![token],
            log_prob: 0.0,
            step_log_probs: Vec::new(),
            finished: false,
        }
    }

    pub fn generated(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn score(&self, length_penalty: f64) -> f64 {
        if length_penalty == 0.0 || self.generated() == 0 {
            self.log_prob
        } else {
            self.log_prob / (self.generated() as f64).powf(length_penalty)
        }
    }

    fn extend(&self, token: TokenId, lp: f64, eos: TokenId) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        let mut step_log_probs = self.step_log_probs.clone();
        step_log_probs.push(lp);
        Hypothesis {
            tokens,
            log_prob: self.log_prob + lp,
            step_log_probs,
            finished: token == eos,
        }
    }
}

/// Indices of the `k` largest entries, highest first, lower index on ties.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| desc(values[a], values[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// One beam step. Live hypotheses are expanded by their `width` best next
/// tokens, finished ones carry over, and the best `width` by length-normalised
/// score survive (ties go to the lexicographically smaller sequence).
pub fn beam_step<F>(
    beam: &[Hypothesis],
    width: usize,
    length_penalty: f64,
    eos: TokenId,
    log_probs: &mut F,
) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    if width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    if beam.iter().all(|h| h.finished) {
        return Ok(beam.to_vec());
    }
    let mut candidates = Vec::new();
    for h in beam {
        if h.finished {
            candidates.push(h.clone());
            continue;
        }
        let lp = log_probs(&h.tokens)?;
        for t in top_k(&lp, width) {
            candidates.push(h.extend(t as TokenId, lp[t], eos));
        }
    }
    candidates.sort_by(|a, b| {
        desc(a.score(length_penalty), b.score(length_penalty)).then_with(|| a.tokens.cmp(&b.tokens))
    });
    candidates.truncate(width);
    Ok(candidates)
}

/// Beam search from `start` for at most `max_len` generated tokens. Returns
/// the final beam, best first.
pub fn beam_search<F>(
    mut log_probs: F,
    start: TokenId,
    eos: TokenId,
    width: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<Hypothesis>>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let mut beam = vec![Hypothesis::start(start)];
    for _ in 0..max_len {
        let next = beam_step(&beam, width, length_penalty, eos, &mut log_probs)?;
        if next == beam {
            break;
        }
        beam = next;
    }
    Ok(beam)
}

/// Argmax decoding, lowest id on ties.
pub fn greedy_search<F>(mut log_probs: F, start: TokenId, eos: TokenId, max_len: usize) -> Result<Hypothesis>
where
    F: FnMut(&[TokenId]) -> Result<Vec<f64>>,
{
    let mut h = Hypothesis::start(start);
    while !h.finished && h.generated() < max_len {
        let lp = log_probs(&h.tokens)?;
        let t = top_k(&lp, 1)[0];
        h = h.extend(t as TokenId, lp[t], eos);
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceTranslation {
    /// Without BOS and EOS.
    pub tokens: Vec<TokenId>,
    pub log_prob: f64,
    pub finished: bool,
    /// Source and target cache sizes the sentence was translated with.
    pub context_sizes: (usize, usize),
    /// Per output position including EOS, when requested.
    pub traces: Vec<DecoderStepTrace>,
}

/// Translates one encoded sentence against a fixed context.
pub fn translate_sentence(
    model: &Model,
    encoded: &EncodedSentence,
    ctx: &ContextState,
    search: &SearchConfig,
    with_traces: bool,
) -> Result<SentenceTranslation> {
    let max_len = max_output_len(encoded.token_ids.len()).min(model.cfg.max_len.saturating_sub(1)).max(1);
    let log_probs = |prefix: &[TokenId]| -> Result<Vec<f64>> {
        let step = model.decode_step(prefix, encoded, ctx, search.gate)?;
        Ok(step.p_w.iter().map(|p| p.ln()).collect())
    };
    let best = if search.beam <= 1 {
        greedy_search(log_probs, BOS, EOS, max_len)?
    } else {
        beam_search(log_probs, BOS, EOS, search.beam, max_len, search.length_penalty)?.remove(0)
    };
    let mut tokens = best.tokens[1..].to_vec();
    if best.finished {
        tokens.pop();
    }
    let traces = if with_traces {
        sentence_traces(model, encoded, ctx, &best.tokens, search.gate)?
    } else {
        Vec::new()
    };
    Ok(SentenceTranslation {
        tokens,
        log_prob: best.log_prob,
        finished: best.finished,
        context_sizes: (ctx.source().len(), ctx.target().len()),
        traces,
    })
}

/// Step traces for a chosen output in one teacher-forced pass. Causal
/// masking makes every row equal to the search-time step.
fn sentence_traces(
    model: &Model,
    encoded: &EncodedSentence,
    ctx: &ContextState,
    chosen: &[TokenId],
    gate: GateOverride,
) -> Result<Vec<DecoderStepTrace>> {
    let prefix = &chosen[..chosen.len() - 1];
    if prefix.is_empty() {
        return Ok(Vec::new());
    }
    let mut s = Session::eval(&model.store);
    let memory = s.constant(encoded.states.clone());
    let pass = model.decode_graph(&mut s, prefix, memory, ctx.target(), gate)?;
    Ok((0..prefix.len()).map(|t| step_trace(&s, &pass, t)).collect())
}

/// Appends a finished sentence to the caches: its pre-integration encoder
/// states, and the decoder states of one teacher-forced pass over the output.
/// An empty output adds no target entry.
pub fn update_context(model: &Model, ctx: &mut ContextState, encoded: &EncodedSentence, output: &[TokenId]) -> Result<()> {
    ctx.push_source(model.source_entry(encoded)?);
    if let Some(entry) = model.target_entry(output, encoded)? {
        ctx.push_target(entry);
    }
    Ok(())
}

/// Translates the sentences of one document in order, conditioning each on
/// the model's own previous outputs. Caches start empty.
pub fn translate_document(
    model: &Model,
    sources: &[Vec<TokenId>],
    n_context: usize,
    search: &SearchConfig,
    with_traces: bool,
) -> Result<Vec<SentenceTranslation>> {
    let mut ctx = ContextState::new(n_context);
    let mut out = Vec::with_capacity(sources.len());
    for src in sources {
        let src = if src.is_empty() { vec![EOS] } else { src.clone() };
        let encoded = model.encode(&src, &ctx)?;
        let tr = translate_sentence(model, &encoded, &ctx, search, with_traces)?;
        update_context(model, &mut ctx, &encoded, &tr.tokens)?;
        out.push(tr);
    }
    Ok(out)
}

/// Tab-separated per-step dump of the copy path for one document.
pub fn trace_tsv(doc_id: &str, translations: &[SentenceTranslation], vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for (k, tr) in translations.iter().enumerate() {
        let chosen: Vec<TokenId> = tr.tokens.iter().copied().chain([EOS]).collect();
        for (step, (t, &tok)) in tr.traces.iter().zip(&chosen).enumerate() {
            let i = tok as usize;
            let alpha = t.alpha.as_ref().map_or(0.0, |a| a[i]);
            let sent = t.attention.as_ref().map_or(String::new(), |a| {
                (0..a.sentences())
                    .map(|j| {
                        let w = (0..a.heads()).map(|h| a.sentence_weights[h][j]).sum::<f64>() / a.heads() as f64;
                        format!("{w:.4}")
                    })
                    .collect::<Vec<_>>()
                    .join(",")
            });
            let gate = t
                .gate
                .as_ref()
                .map_or(String::new(), |g| format!("{:.4}", g.iter().sum::<f64>() / g.len() as f64));
            let _ = writeln!(
                out,
                "{doc_id}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{gate}\t{sent}",
                k + 1,
                step + 1,
                vocab.token(tok),
                t.p_copy,
                t.p_vocab[i],
                alpha,
                t.p_w[i],
            );
        }
    }
    out
}

pub const TRACE_HEADER: &str = "doc\tsentence\tstep\ttoken\tp_copy\tp_vocab\talpha\tp_w\tmean_gate\tsentence_weights\n";
