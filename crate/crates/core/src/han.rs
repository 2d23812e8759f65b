//! Hierarchical attention over cached context sentences.
//!
//! Every query position first summarises each context sentence with
//! word-level attention, then attends over those summaries, and finally
//! gates the resulting document vector into its own state.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::Session;
use crate::transformer::{FeedForward, Init, Linear, ModelConfig, MultiHeadAttention};

#[derive(Debug, Clone)]
pub struct HanLayout {
    pub word_query: Linear,
    pub word_attn: MultiHeadAttention,
    pub sent_query: Linear,
    pub sent_attn: MultiHeadAttention,
    pub ffn: FeedForward,
    pub gate_state: Linear,
    pub gate_context: Linear,
}

/// Graph-level attention weights of one HAN pass over `T` query rows.
#[derive(Debug, Clone)]
pub struct HanTrace {
    /// Per head, `[T × n_sentences]`.
    pub sentence_weights: Vec<Var>,
    /// Per sentence, per head, `[T × sentence_len]`.
    pub word_weights: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct HanOutput {
    pub integrated: Var,
    pub doc_context: Var,
    pub gate: Var,
    pub trace: HanTrace,
}

impl HanLayout {
    pub(crate) fn register(init: &mut Init, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(HanLayout {
            word_query: init.linear(&format!("{prefix}.word_query"), d, d, true)?,
            word_attn: init.mha(&format!("{prefix}.word_attn"), d, cfg.heads)?,
            sent_query: init.linear(&format!("{prefix}.sent_query"), d, d, true)?,
            sent_attn: init.mha(&format!("{prefix}.sent_attn"), d, cfg.heads)?,
            ffn: init.ffn(&format!("{prefix}.ffn"), d, cfg.d_ff)?,
            gate_state: init.linear(&format!("{prefix}.gate_state"), d, d, false)?,
            gate_context: init.linear(&format!("{prefix}.gate_context"), d, d, false)?,
        })
    }

    /// Summary of one context sentence for every query row, `[T × d]`, and
    /// the per-head word weights `[T × len]`.
    pub fn word_level_context(
        &self,
        s: &mut Session,
        h: Var,
        sentence: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if s.value(sentence).rows() == 0 {
            return Err(Error::contract("word-level attention over an empty sentence"));
        }
        let q = self.word_query.forward(s, h)?;
        self.word_attn.forward(s, q, sentence, sentence, None)
    }

    /// Document vector `[T × d]` from per-sentence summaries, each `[T × d]`
    /// with row `t` belonging to query row `t`. Returns per-head sentence
    /// weights `[T × n]`.
    pub fn sentence_level_context(
        &self,
        s: &mut Session,
        h: Var,
        summaries: &[Var],
    ) -> Result<(Var, Vec<Var>)> {
        if summaries.is_empty() {
            return Err(Error::contract("sentence-level attention with no summaries"));
        }
        let q = self.sent_query.forward(s, h)?;
        let (att, weights) = rowwise_attention(s, &self.sent_attn, q, summaries)?;
        Ok((self.ffn.forward(s, att)?, weights))
    }

    /// `λ = σ(W_h·h + W_d·d)`, `h̃ = λ⊙h + (1−λ)⊙d`, written as
    /// `d + λ⊙(h − d)` so that `h == d` returns `h` exactly.
    pub fn gate_integrate(&self, s: &mut Session, h: Var, d: Var) -> Result<(Var, Var)> {
        let a = self.gate_state.forward(s, h)?;
        let b = self.gate_context.forward(s, d)?;
        let logits = s.graph.add(a, b)?;
        let lambda = s.graph.sigmoid(logits);
        let diff = s.graph.sub(h, d)?;
        let scaled = s.graph.mul(lambda, diff)?;
        let out = s.graph.add(d, scaled)?;
        Ok((out, lambda))
    }

    /// Full pass over a non-empty list of context sentences `[len_j × d]`.
    pub fn attend(&self, s: &mut Session, h: Var, context: &[Var]) -> Result<HanOutput> {
        let mut summaries = Vec::with_capacity(context.len());
        let mut word_weights = Vec::with_capacity(context.len());
        for &sentence in context {
            let (sj, w) = self.word_level_context(s, h, sentence)?;
            summaries.push(sj);
            word_weights.push(w);
        }
        let (doc_context, sentence_weights) = self.sentence_level_context(s, h, &summaries)?;
        let (integrated, gate) = self.gate_integrate(s, h, doc_context)?;
        Ok(HanOutput {
            integrated,
            doc_context,
            gate,
            trace: HanTrace {
                sentence_weights,
                word_weights,
            },
        })
    }
}

/// Multi-head attention where query row `t` attends over row `t` of each
/// key matrix, so every query has its own key set.
fn rowwise_attention(
    s: &mut Session,
    mha: &MultiHeadAttention,
    query: Var,
    keys: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let q = mha.q.forward(s, query)?;
    let rows = s.value(q).rows();
    let mut ks = Vec::with_capacity(keys.len());
    let mut vs = Vec::with_capacity(keys.len());
    for &key in keys {
        if s.value(key).shape() != s.value(query).shape() {
            return Err(Error::shape("sentence attention", s.value(key).shape(), s.value(query).shape()));
        }
        ks.push(mha.k.forward(s, key)?);
        vs.push(mha.v.forward(s, key)?);
    }
    let d = s.value(q).cols();
    let dh = d / mha.heads;
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(mha.heads);
    let mut weights = Vec::with_capacity(mha.heads);
    for head in 0..mha.heads {
        let cut = |s: &mut Session, x: Var| -> Result<Var> {
            if mha.heads == 1 {
                Ok(x)
            } else {
                s.graph.slice_cols(x, head * dh, dh)
            }
        };
        let qh = cut(s, q)?;
        let mut logits = Vec::with_capacity(keys.len());
        let mut values = Vec::with_capacity(keys.len());
        for (&k, &v) in ks.iter().zip(&vs) {
            let kh = cut(s, k)?;
            let prod = s.graph.mul(qh, kh)?;
            let dot = s.graph.sum_axis(prod, 1)?;
            logits.push(s.graph.scale(dot, inv_sqrt));
            values.push(cut(s, v)?);
        }
        let logits = if logits.len() == 1 {
            logits[0]
        } else {
            s.graph.concat_cols(&logits)?
        };
        let w = s.graph.softmax(logits)?;
        debug_assert_eq!(s.value(w).shape(), &[rows, keys.len()]);
        let mut acc: Option<Var> = None;
        for (j, &vh) in values.iter().enumerate() {
            let wj = s.graph.slice_cols(w, j, 1)?;
            let term = s.graph.mul_col(vh, wj)?;
            acc = Some(match acc {
                Some(a) => s.graph.add(a, term)?,
                None => term,
            });
        }
        outs.push(acc.expect("at least one key"));
        weights.push(w);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        s.graph.concat_cols(&outs)?
    };
    Ok((mha.o.forward(s, cat)?, weights))
}

/// Attention weights of one query position, read back from a [`HanTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    /// `[head][sentence]`
    pub sentence_weights: Vec<Vec<f64>>,
    /// `[head][sentence][token]`
    pub word_weights: Vec<Vec<Vec<f64>>>,
}

impl AttentionTrace {
    pub fn heads(&self) -> usize {
        self.sentence_weights.len()
    }

    pub fn sentences(&self) -> usize {
        self.sentence_weights.first().map_or(0, Vec::len)
    }

    /// Extracts row `t` of every weight matrix.
    pub fn at_position(s: &Session, trace: &HanTrace, t: usize) -> Self {
        let sentence_weights = trace
            .sentence_weights
            .iter()
            .map(|&w| s.value(w).row(t).to_vec())
            .collect();
        let heads = trace.sentence_weights.len();
        let word_weights = (0..heads)
            .map(|head| {
                trace
                    .word_weights
                    .iter()
                    .map(|per_head| s.value(per_head[head]).row(t).to_vec())
                    .collect()
            })
            .collect();
        AttentionTrace {
            sentence_weights,
            word_weights,
        }
    }

    /// Largest deviation of any weight vector's sum from 1, and whether any
    /// weight is negative.
    pub fn normalisation_error(&self) -> (f64, bool) {
        let mut worst = 0.0f64;
        let mut negative = false;
        let all = self
            .sentence_weights
            .iter()
            .chain(self.word_weights.iter().flatten());
        for w in all {
            worst = worst.max((w.iter().sum::<f64>() - 1.0).abs());
            negative |= w.iter().any(|&x| x < 0.0);
        }
        (worst, negative)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{ParamGroup, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout(d: usize, heads: usize, seed: u64) -> (ParamStore, HanLayout) {
        let mut cfg = ModelConfig::toy(8, 8);
        cfg.d_model = d;
        cfg.heads = heads;
        cfg.d_ff = 2 * d;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let han = HanLayout::register(
            &mut Init { store: &mut store, rng: &mut rng, group: ParamGroup::HanDecoder },
            "han",
            &cfg,
        )
        .unwrap();
        (store, han)
    }

    fn rows(n: usize, d: usize, salt: usize) -> Tensor {
        let data = (0..n * d).map(|i| (((i + salt) * 37 % 17) as f64 / 8.0) - 1.0).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn singleton_context_sentence() {
        let (store, han) = layout(4, 2, 1);
        let mut s = Session::eval(&store);
        let h = s.constant(rows(3, 4, 0));
        let ctx = s.constant(rows(1, 4, 5));
        let (sj, w) = han.word_level_context(&mut s, h, ctx).unwrap();
        for head in &w {
            assert_eq!(s.value(*head).data(), &[1.0, 1.0, 1.0]);
        }
        // every query row receives o(v(ctx))
        let v = han.word_attn.v.forward(&mut s, ctx).unwrap();
        let o = han.word_attn.o.forward(&mut s, v).unwrap();
        let sv = s.value(sj);
        for r in 0..3 {
            for (a, b) in sv.row(r).iter().zip(s.value(o).row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_rows_get_equal_word_weights() {
        let (store, han) = layout(4, 2, 2);
        let mut s = Session::eval(&store);
        let h = s.constant(rows(2, 4, 1));
        let r = rows(1, 4, 9);
        let mut data = r.data().to_vec();
        data.extend_from_slice(r.data());
        data.extend_from_slice(rows(1, 4, 3).data());
        let ctx = s.constant(Tensor::new(vec![3, 4], data).unwrap());
        let (_, w) = han.word_level_context(&mut s, h, ctx).unwrap();
        for head in w {
            let wv = s.value(head);
            for t in 0..2 {
                assert_eq!(wv.at(t, 0), wv.at(t, 1));
                assert!((wv.row(t).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sentence_level_singleton_and_identical_summaries() {
        let (store, han) = layout(4, 2, 3);
        let mut s = Session::eval(&store);
        let h = s.constant(rows(2, 4, 2));
        let s1 = s.constant(rows(2, 4, 7));
        let (d, w) = han.sentence_level_context(&mut s, h, &[s1]).unwrap();
        for head in &w {
            assert_eq!(s.value(*head).data(), &[1.0, 1.0]);
        }
        let v = han.sent_attn.v.forward(&mut s, s1).unwrap();
        let o = han.sent_attn.o.forward(&mut s, v).unwrap();
        let f = han.ffn.forward(&mut s, o).unwrap();
        assert!(s.value(d).max_abs_diff(s.value(f)) < 1e-12);

        let (_, w) = han.sentence_level_context(&mut s, h, &[s1, s1, s1]).unwrap();
        for head in w {
            for &p in s.value(head).data() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert!(han.sentence_level_context(&mut s, h, &[]).is_err());
    }

    #[test]
    fn gate_cases() {
        let (mut store, han) = layout(2, 1, 4);
        let hv = Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap();
        let dv = Tensor::from_rows(&[vec![3.0, 0.5]]).unwrap();
        {
            // fixed point: h == d
            let mut s = Session::eval(&store);
            let h = s.constant(hv.clone());
            let (out, _) = han.gate_integrate(&mut s, h, h).unwrap();
            assert_eq!(s.value(out), s.value(h));
        }
        store.get_mut(han.gate_state.w).tensor = Tensor::zeros(&[2, 2]);
        store.get_mut(han.gate_context.w).tensor = Tensor::zeros(&[2, 2]);
        {
            let mut s = Session::eval(&store);
            let (h, d) = (s.constant(hv.clone()), s.constant(dv.clone()));
            let (out, lambda) = han.gate_integrate(&mut s, h, d).unwrap();
            assert_eq!(s.value(lambda).data(), &[0.5, 0.5]);
            assert_eq!(s.value(out).data(), &[2.0, -0.75]);
        }
        // hand case: W_h = I, W_d = 0 gives λ = σ(h)
        store.get_mut(han.gate_state.w).tensor = Tensor::identity(2);
        let mut s = Session::eval(&store);
        let (h, d) = (s.constant(hv), s.constant(dv));
        let (out, _) = han.gate_integrate(&mut s, h, d).unwrap();
        let (l0, l1) = (1.0 / (1.0 + (-1.0f64).exp()), 1.0 / (1.0 + 2.0f64.exp()));
        let want = [l0 * 1.0 + (1.0 - l0) * 3.0, l1 * -2.0 + (1.0 - l1) * 0.5];
        for (a, b) in s.value(out).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn trace_is_normalised_per_position() {
        let (store, han) = layout(8, 4, 5);
        let mut s = Session::eval(&store);
        let h = s.constant(rows(3, 8, 0));
        let c1 = s.constant(rows(2, 8, 11));
        let c2 = s.constant(rows(5, 8, 23));
        let out = han.attend(&mut s, h, &[c1, c2]).unwrap();
        for t in 0..3 {
            let tr = AttentionTrace::at_position(&s, &out.trace, t);
            assert_eq!((tr.heads(), tr.sentences()), (4, 2));
            assert_eq!(tr.word_weights[3][1].len(), 5);
            let (err, neg) = tr.normalisation_error();
            assert!(err <= 1e-12 && !neg);
        }
    }
}
