//! Post-norm Transformer encoder and decoder stacks.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::Session;
use crate::tensor::Tensor;
use crate::transformer::config::ModelConfig;
use crate::transformer::layers::{
    causal_mask, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention,
};
use crate::vocab::{BOS, UNK};

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

/// Parameters of the sentence-level model. Source and target embeddings are
/// separate and the output projection is untied.
#[derive(Debug, Clone)]
pub struct BaseLayout {
    pub src_embed: crate::params::ParamId,
    pub tgt_embed: crate::params::ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub generator: Linear,
}

impl BaseLayout {
    pub(crate) fn register(init: &mut Init, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let src_embed = init.embedding("enc.embed", cfg.vocab_src, d)?;
        let tgt_embed = init.embedding("dec.embed", cfg.vocab_tgt, d)?;
        let mut encoder = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("enc.{l}");
            encoder.push(EncoderLayer {
                self_attn: init.mha(&format!("{p}.self"), d, cfg.heads)?,
                norm1: init.layer_norm(&format!("{p}.norm1"), d)?,
                ffn: init.ffn(&format!("{p}.ffn"), d, cfg.d_ff)?,
                norm2: init.layer_norm(&format!("{p}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("dec.{l}");
            decoder.push(DecoderLayer {
                self_attn: init.mha(&format!("{p}.self"), d, cfg.heads)?,
                norm1: init.layer_norm(&format!("{p}.norm1"), d)?,
                cross_attn: init.mha(&format!("{p}.cross"), d, cfg.heads)?,
                norm2: init.layer_norm(&format!("{p}.norm2"), d)?,
                ffn: init.ffn(&format!("{p}.ffn"), d, cfg.d_ff)?,
                norm3: init.layer_norm(&format!("{p}.norm3"), d)?,
            });
        }
        let generator = init.linear("generator", d, cfg.vocab_tgt, true)?;
        Ok(BaseLayout {
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            generator,
        })
    }

    /// Scaled embeddings plus sinusoidal positions, then dropout.
    fn embed(
        &self,
        s: &mut Session,
        table: crate::params::ParamId,
        vocab: usize,
        positions: &Tensor,
        tokens: &[u32],
    ) -> Result<Var> {
        if tokens.len() > positions.rows() {
            return Err(Error::contract(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                positions.rows()
            )));
        }
        let ids: Vec<usize> = tokens
            .iter()
            .map(|&t| if (t as usize) < vocab { t as usize } else { UNK as usize })
            .collect();
        let table = s.param(table);
        let e = s.graph.embedding(table, &ids)?;
        let d = s.value(e).cols();
        let e = s.graph.scale(e, (d as f64).sqrt());
        let pe = s.constant(positions.slice_rows(0, tokens.len())?);
        let x = s.graph.add(e, pe)?;
        s.dropout(x)
    }

    /// Final-layer encoder states `[len × d]`.
    pub fn encode(
        &self,
        s: &mut Session,
        cfg: &ModelConfig,
        positions: &Tensor,
        tokens: &[u32],
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("cannot encode an empty sentence"));
        }
        let mut x = self.embed(s, self.src_embed, cfg.vocab_src, positions, tokens)?;
        for layer in &self.encoder {
            let (a, _) = layer.self_attn.forward(s, x, x, x, None)?;
            let a = s.dropout(a)?;
            let r = s.graph.add(x, a)?;
            x = layer.norm1.forward(s, r)?;
            let f = layer.ffn.forward(s, x)?;
            let f = s.dropout(f)?;
            let r = s.graph.add(x, f)?;
            x = layer.norm2.forward(s, r)?;
        }
        Ok(x)
    }

    /// Final-layer decoder states `[len(prefix) × d]` and the last layer's
    /// per-head cross-attention weights.
    pub fn decode(
        &self,
        s: &mut Session,
        cfg: &ModelConfig,
        positions: &Tensor,
        prefix: &[u32],
        memory: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::contract("decoder prefix must start with BOS"));
        }
        let t = prefix.len();
        let mask = causal_mask(t);
        let mut x = self.embed(s, self.tgt_embed, cfg.vocab_tgt, positions, prefix)?;
        let mut cross = Vec::new();
        for layer in &self.decoder {
            let (a, _) = layer.self_attn.forward(s, x, x, x, Some(&mask))?;
            let a = s.dropout(a)?;
            let r = s.graph.add(x, a)?;
            x = layer.norm1.forward(s, r)?;
            let (c, w) = layer.cross_attn.forward(s, x, memory, memory, None)?;
            cross = w;
            let c = s.dropout(c)?;
            let r = s.graph.add(x, c)?;
            x = layer.norm2.forward(s, r)?;
            let f = layer.ffn.forward(s, x)?;
            let f = s.dropout(f)?;
            let r = s.graph.add(x, f)?;
            x = layer.norm3.forward(s, r)?;
        }
        Ok((x, cross))
    }

    /// `softmax(h̃·W + b)` over the target vocabulary, one row per position.
    pub fn output_distribution(&self, s: &mut Session, h_tilde: Var) -> Result<Var> {
        let logits = self.generator.forward(s, h_tilde)?;
        s.graph.softmax(logits)
    }
}
