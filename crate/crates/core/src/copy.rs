//! Copying words from previous translations.
//!
//! A scalar gate mixes the vocabulary distribution with copy weights taken
//! from the target-side hierarchical attention, so words already used in
//! the document get boosted.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::han::AttentionTrace;
use crate::params::{ParamId, Session};
use crate::tensor::Tensor;
use crate::transformer::{Init, Linear, ModelConfig, MultiHeadAttention};
use crate::vocab::TokenId;

#[derive(Debug, Clone)]
pub struct CopyLayout {
    /// Dedicated attention from the integrated decoder state to the current
    /// sentence's encoder states.
    pub context_attn: MultiHeadAttention,
    pub gate_state: Linear,
    pub gate_source: Linear,
    pub gate_doc: Linear,
    pub gate_bias: ParamId,
}

impl CopyLayout {
    pub(crate) fn register(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(CopyLayout {
            context_attn: init.mha("copy.context_attn", d, cfg.heads)?,
            gate_state: init.linear("copy.gate_state", d, 1, false)?,
            gate_source: init.linear("copy.gate_source", d, 1, false)?,
            gate_doc: init.linear("copy.gate_doc", d, 1, false)?,
            gate_bias: init.filled("copy.gate_bias", &[1], 0.0)?,
        })
    }

    /// Source context vector per decoder row `[T × d]` and per-head weights.
    pub fn encoder_context_attention(
        &self,
        s: &mut Session,
        h_tilde: Var,
        encoded: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.context_attn.forward(s, h_tilde, encoded, encoded, None)
    }

    /// `p_copy = σ(W_h̃·h̃ + W_c·c + W_dy·d + b)`, one row per position.
    pub fn copy_gate(&self, s: &mut Session, h_tilde: Var, source_ctx: Var, doc_ctx: Var) -> Result<Var> {
        let a = self.gate_state.forward(s, h_tilde)?;
        let b = self.gate_source.forward(s, source_ctx)?;
        let c = self.gate_doc.forward(s, doc_ctx)?;
        let ab = s.graph.add(a, b)?;
        let abc = s.graph.add(ab, c)?;
        let bias = s.param(self.gate_bias);
        let logit = s.graph.add_row(abc, bias)?;
        Ok(s.graph.sigmoid(logit))
    }
}

/// Scatter targets for cached tokens: `None` drops a token from the copy
/// distribution.
pub fn copy_targets(
    cache_tokens: &[&[TokenId]],
    vocab_size: usize,
    is_excluded: &dyn Fn(TokenId) -> bool,
) -> Vec<Option<usize>> {
    cache_tokens
        .iter()
        .flat_map(|s| s.iter())
        .map(|&t| (!is_excluded(t) && (t as usize) < vocab_size).then_some(t as usize))
        .collect()
}

/// Head-averaged copy weights on the graph.
///
/// `sentence_weights` holds one `[T × n]` matrix per head and
/// `word_weights[j]` one `[T × len_j]` matrix per head. Token `i` of
/// sentence `j` receives `mean_ℓ a_j · mean_ℓ a_{j,i}`; weights are then
/// scatter-added by token id into `[T × vocab]`. Dropped tokens have their
/// mass spread over the rest by renormalising.
///
/// Returns the token-level weights `[T × Σ len_j]` and the vocabulary
/// weights, or `None` when no cached token can be copied.
pub fn copy_weights_graph(
    g: &mut Graph,
    sentence_weights: &[Var],
    word_weights: &[Vec<Var>],
    targets: &[Option<usize>],
    vocab_size: usize,
) -> Result<Option<(Var, Var)>> {
    let heads = sentence_weights.len();
    if heads == 0 || word_weights.iter().any(|w| w.len() != heads) {
        return Err(Error::contract("copy weights need the same head count at both levels"));
    }
    let sentences = g.value(sentence_weights[0]).cols();
    if word_weights.len() != sentences {
        return Err(Error::contract(format!(
            "trace covers {sentences} sentences but {} word-weight sets were given",
            word_weights.len()
        )));
    }
    let total: usize = word_weights.iter().map(|w| g.value(w[0]).cols()).sum();
    if total != targets.len() {
        return Err(Error::contract(format!(
            "trace covers {total} cached tokens but {} were given",
            targets.len()
        )));
    }
    if targets.iter().all(Option::is_none) {
        return Ok(None);
    }
    let sent_avg = head_mean(g, sentence_weights)?;
    let mut per_sentence = Vec::with_capacity(sentences);
    for (j, heads_j) in word_weights.iter().enumerate() {
        let word_avg = head_mean(g, heads_j)?;
        let aj = g.slice_cols(sent_avg, j, 1)?;
        per_sentence.push(g.mul_col(word_avg, aj)?);
    }
    let tokens = if per_sentence.len() == 1 {
        per_sentence[0]
    } else {
        g.concat_cols(&per_sentence)?
    };
    let mut alpha = g.scatter_cols(tokens, targets, vocab_size)?;
    if targets.iter().any(Option::is_none) {
        let mass = g.sum_axis(alpha, 1)?;
        alpha = g.div_col(alpha, mass)?;
    }
    Ok(Some((tokens, alpha)))
}

fn head_mean(g: &mut Graph, per_head: &[Var]) -> Result<Var> {
    let mut acc = per_head[0];
    for &w in &per_head[1..] {
        acc = g.add(acc, w)?;
    }
    Ok(g.scale(acc, 1.0 / per_head.len() as f64))
}

/// `P_w = (1 − p_copy)·P_vocab + p_copy·α`, row by row. `p_copy` is `[T×1]`.
pub fn mix_distributions(g: &mut Graph, p_vocab: Var, alpha: Var, p_copy: Var) -> Result<Var> {
    let keep = g.one_minus(p_copy);
    let gen = g.mul_col(p_vocab, keep)?;
    let copy = g.mul_col(alpha, p_copy)?;
    g.add(gen, copy)
}

/// Copy weights of one position computed from plain vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyWeights {
    /// `[sentence][token]`, before scattering.
    pub token: Vec<Vec<f64>>,
    /// Over the target vocabulary; all zero when nothing can be copied.
    pub vocab: Vec<f64>,
}

/// Evaluates [`copy_weights_graph`] on a single-position trace.
pub fn copy_attention_weights(
    trace: &AttentionTrace,
    cache_tokens: &[&[TokenId]],
    vocab_size: usize,
    is_excluded: &dyn Fn(TokenId) -> bool,
) -> Result<CopyWeights> {
    let heads = trace.heads();
    if heads == 0 || trace.word_weights.len() != heads {
        return Err(Error::contract("trace has no heads or mismatched head counts"));
    }
    if trace.sentences() != cache_tokens.len() {
        return Err(Error::contract(format!(
            "trace covers {} sentences, cache holds {}",
            trace.sentences(),
            cache_tokens.len()
        )));
    }
    for head in 0..heads {
        if trace.sentence_weights[head].len() != cache_tokens.len()
            || trace.word_weights[head].len() != cache_tokens.len()
        {
            return Err(Error::contract("ragged trace"));
        }
        for (w, toks) in trace.word_weights[head].iter().zip(cache_tokens) {
            if w.len() != toks.len() || toks.is_empty() {
                return Err(Error::contract(format!(
                    "word weights of length {} for a sentence of {} tokens",
                    w.len(),
                    toks.len()
                )));
            }
        }
    }
    let empty = || CopyWeights {
        token: cache_tokens.iter().map(|s| vec![0.0; s.len()]).collect(),
        vocab: vec![0.0; vocab_size],
    };
    if cache_tokens.is_empty() {
        return Ok(empty());
    }
    let mut g = Graph::new();
    let sentence_weights: Vec<Var> = trace
        .sentence_weights
        .iter()
        .map(|w| g.constant(Tensor::row_vector(w.clone()).unwrap()))
        .collect();
    let word_weights: Vec<Vec<Var>> = (0..cache_tokens.len())
        .map(|j| {
            (0..heads)
                .map(|head| g.constant(Tensor::row_vector(trace.word_weights[head][j].clone()).unwrap()))
                .collect()
        })
        .collect();
    let targets = copy_targets(cache_tokens, vocab_size, is_excluded);
    let Some((tokens, alpha)) =
        copy_weights_graph(&mut g, &sentence_weights, &word_weights, &targets, vocab_size)?
    else {
        return Ok(empty());
    };
    let flat = g.value(tokens).data();
    let mut token = Vec::with_capacity(cache_tokens.len());
    let mut at = 0;
    for s in cache_tokens {
        token.push(flat[at..at + s.len()].to_vec());
        at += s.len();
    }
    Ok(CopyWeights {
        token,
        vocab: g.value(alpha).data().to_vec(),
    })
}

/// Copy quantities of one decoded position.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyDistribution {
    pub alpha_vocab: Vec<f64>,
    pub p_copy: f64,
    pub p_w: Vec<f64>,
}
