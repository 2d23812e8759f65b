//! The assembled model: base Transformer plus optional source-side and
//! target-side context layers and the copy gate.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::context::{CacheEntry, ContextState};
use crate::copy::{copy_targets, copy_weights_graph, mix_distributions, CopyLayout};
use crate::error::{Error, Result};
use crate::han::{AttentionTrace, HanLayout, HanOutput};
use crate::params::{GroupSet, ParamGroup, ParamStore, Session};
use crate::tensor::Tensor;
use crate::transformer::{sinusoid_table, BaseLayout, Init, ModelConfig};
use crate::vocab::{TokenId, BOS, NUM_RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Sentence,
    HanEncoder,
    HanDecoder,
    HanJoint,
    Copy,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Sentence,
        Variant::HanEncoder,
        Variant::HanDecoder,
        Variant::HanJoint,
        Variant::Copy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sentence => "sentence",
            Variant::HanEncoder => "han-encoder",
            Variant::HanDecoder => "han-decoder",
            Variant::HanJoint => "han-joint",
            Variant::Copy => "copy",
        }
    }

    /// Parameter groups the variant needs.
    pub fn groups(self) -> GroupSet {
        let mut g = GroupSet::of(&[ParamGroup::Base]);
        if self.source_context() {
            g = g.with(ParamGroup::HanEncoder);
        }
        if self.target_context() {
            g = g.with(ParamGroup::HanDecoder);
        }
        if self.copies() {
            g = g.with(ParamGroup::Copy);
        }
        g
    }

    pub fn source_context(self) -> bool {
        matches!(self, Variant::HanEncoder | Variant::HanJoint | Variant::Copy)
    }

    pub fn target_context(self) -> bool {
        matches!(self, Variant::HanDecoder | Variant::HanJoint | Variant::Copy)
    }

    pub fn copies(self) -> bool {
        self == Variant::Copy
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

/// How the copy gate is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateOverride {
    #[default]
    Learned,
    /// Replaces `p_copy` with a constant wherever the gate would be open.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub variant: Variant,
    pub store: ParamStore,
    base: BaseLayout,
    han_enc: Option<HanLayout>,
    han_dec: Option<HanLayout>,
    copy: Option<CopyLayout>,
    positions: Tensor,
}

/// Encoder output for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    /// States the decoder attends to, after any context integration.
    pub states: Tensor,
    /// Final-layer states before context integration; these are what the
    /// source cache stores.
    pub base_states: Tensor,
    pub token_ids: Vec<TokenId>,
    pub pad_mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub base: Var,
    pub states: Var,
    pub han: Option<HanOutput>,
}

#[derive(Debug, Clone)]
pub struct CopyPass {
    pub source_context: Var,
    pub source_weights: Vec<Var>,
    /// `[T × 1]`
    pub p_copy: Var,
    pub token_alpha: Var,
    pub alpha: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderPass {
    /// Final decoder layer before context integration, `[T × d]`.
    pub hidden: Var,
    pub integrated: Var,
    pub cross_weights: Vec<Var>,
    pub han: Option<HanOutput>,
    pub p_vocab: Var,
    pub copy: Option<CopyPass>,
    /// The distribution the model predicts from: `P_w` when copying,
    /// otherwise `P_vocab`.
    pub output: Var,
}

/// Everything computed for one decoded position.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStepTrace {
    pub step: usize,
    pub hidden: Vec<f64>,
    pub integrated: Vec<f64>,
    pub doc_context: Option<Vec<f64>>,
    pub gate: Option<Vec<f64>>,
    pub source_context: Option<Vec<f64>>,
    /// Zero when the copy path is closed.
    pub p_copy: f64,
    pub attention: Option<AttentionTrace>,
    pub token_alpha: Option<Vec<f64>>,
    pub p_vocab: Vec<f64>,
    pub alpha: Option<Vec<f64>>,
    pub p_w: Vec<f64>,
}

impl Model {
    /// Fresh model with every group the variant needs. Each group draws
    /// from its own stream of `seed`, so a group's initial values do not
    /// depend on which other groups exist.
    pub fn new(cfg: ModelConfig, variant: Variant, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let base = {
            let mut rng = group_rng(seed, ParamGroup::Base);
            let mut init = Init {
                store: &mut store,
                rng: &mut rng,
                group: ParamGroup::Base,
            };
            BaseLayout::register(&mut init, &cfg)?
        };
        let positions = sinusoid_table(cfg.max_len, cfg.d_model);
        let mut model = Model {
            cfg,
            variant: Variant::Sentence,
            store,
            base,
            han_enc: None,
            han_dec: None,
            copy: None,
            positions,
        };
        model.extend_to(variant, seed)?;
        Ok(model)
    }

    /// Adds the groups `variant` needs that are missing, then switches to it.
    pub fn extend_to(&mut self, variant: Variant, seed: u64) -> Result<()> {
        for group in variant.groups().iter() {
            self.add_group(group, seed)?;
        }
        self.variant = variant;
        Ok(())
    }

    /// Registers a parameter group if it is not present yet.
    pub fn add_group(&mut self, group: ParamGroup, seed: u64) -> Result<()> {
        if self.store.groups().contains(group) {
            return Ok(());
        }
        let mut rng = group_rng(seed, group);
        let mut init = Init {
            store: &mut self.store,
            rng: &mut rng,
            group,
        };
        match group {
            ParamGroup::Base => unreachable!("base is always present"),
            ParamGroup::HanEncoder => self.han_enc = Some(HanLayout::register(&mut init, "han_enc", &self.cfg)?),
            ParamGroup::HanDecoder => self.han_dec = Some(HanLayout::register(&mut init, "han_dec", &self.cfg)?),
            ParamGroup::Copy => self.copy = Some(CopyLayout::register(&mut init, &self.cfg)?),
        }
        Ok(())
    }

    /// Switches behaviour to a variant whose groups are all present.
    pub fn set_variant(&mut self, variant: Variant) -> Result<()> {
        let have = self.store.groups();
        if let Some(missing) = variant.groups().iter().find(|g| !have.contains(*g)) {
            return Err(Error::Config(format!(
                "variant {variant} needs parameter group {missing}, which this model lacks"
            )));
        }
        self.variant = variant;
        Ok(())
    }

    pub fn base(&self) -> &BaseLayout {
        &self.base
    }

    pub fn han_encoder(&self) -> Option<&HanLayout> {
        self.han_enc.as_ref()
    }

    pub fn han_decoder(&self) -> Option<&HanLayout> {
        self.han_dec.as_ref()
    }

    pub fn copy_layout(&self) -> Option<&CopyLayout> {
        self.copy.as_ref()
    }

    /// Whether `token` is kept out of the copy distribution.
    pub fn copy_excludes(&self, token: TokenId) -> bool {
        self.cfg.copy_exclude_special && (token as usize) < NUM_RESERVED
    }

    /// Encoder pass with source-side context when the variant uses it and the
    /// cache is non-empty; otherwise exactly the sentence-level encoder.
    pub fn encode_graph(
        &self,
        s: &mut Session,
        tokens: &[TokenId],
        source_ctx: &[CacheEntry],
    ) -> Result<EncoderPass> {
        let base = self.base.encode(s, &self.cfg, &self.positions, tokens)?;
        let han = match (&self.han_enc, self.variant.source_context() && !source_ctx.is_empty()) {
            (Some(han), true) => {
                let ctx: Vec<Var> = source_ctx.iter().map(|e| s.constant(e.states.clone())).collect();
                Some(han.attend(s, base, &ctx)?)
            }
            _ => None,
        };
        let states = han.as_ref().map_or(base, |h| h.integrated);
        Ok(EncoderPass { base, states, han })
    }

    /// Decoder pass over a whole BOS-prefixed sequence.
    pub fn decode_graph(
        &self,
        s: &mut Session,
        prefix: &[TokenId],
        memory: Var,
        target_ctx: &[CacheEntry],
        gate: GateOverride,
    ) -> Result<DecoderPass> {
        let (hidden, cross_weights) = self.base.decode(s, &self.cfg, &self.positions, prefix, memory)?;
        let han = match (&self.han_dec, self.variant.target_context() && !target_ctx.is_empty()) {
            (Some(han), true) => {
                let ctx: Vec<Var> = target_ctx.iter().map(|e| s.constant(e.states.clone())).collect();
                Some(han.attend(s, hidden, &ctx)?)
            }
            _ => None,
        };
        let integrated = han.as_ref().map_or(hidden, |h| h.integrated);
        let p_vocab = self.base.output_distribution(s, integrated)?;
        let copy = match (&self.copy, &han, self.variant.copies()) {
            (Some(layout), Some(han), true) => {
                self.copy_pass(s, layout, han, integrated, memory, target_ctx, gate)?
            }
            _ => None,
        };
        let output = match &copy {
            Some(c) => mix_distributions(&mut s.graph, p_vocab, c.alpha, c.p_copy)?,
            None => p_vocab,
        };
        Ok(DecoderPass {
            hidden,
            integrated,
            cross_weights,
            han,
            p_vocab,
            copy,
            output,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn copy_pass(
        &self,
        s: &mut Session,
        layout: &CopyLayout,
        han: &HanOutput,
        integrated: Var,
        memory: Var,
        target_ctx: &[CacheEntry],
        gate: GateOverride,
    ) -> Result<Option<CopyPass>> {
        let cache: Vec<&[TokenId]> = target_ctx.iter().map(|e| e.tokens.as_slice()).collect();
        let targets = copy_targets(&cache, self.cfg.vocab_tgt, &|t| self.copy_excludes(t));
        let Some((token_alpha, alpha)) = copy_weights_graph(
            &mut s.graph,
            &han.trace.sentence_weights,
            &han.trace.word_weights,
            &targets,
            self.cfg.vocab_tgt,
        )?
        else {
            return Ok(None);
        };
        let (source_context, source_weights) = layout.encoder_context_attention(s, integrated, memory)?;
        let p_copy = match gate {
            GateOverride::Learned => layout.copy_gate(s, integrated, source_context, han.doc_context)?,
            GateOverride::Fixed(p) => {
                let rows = s.value(integrated).rows();
                s.constant(Tensor::filled(&[rows, 1], p))
            }
        };
        Ok(Some(CopyPass {
            source_context,
            source_weights,
            p_copy,
            token_alpha,
            alpha,
        }))
    }

    /// Evaluation-mode encoding against the context's source cache.
    pub fn encode(&self, tokens: &[TokenId], ctx: &ContextState) -> Result<EncodedSentence> {
        let mut s = Session::eval(&self.store);
        let pass = self.encode_graph(&mut s, tokens, ctx.source())?;
        Ok(EncodedSentence {
            states: s.value(pass.states).clone(),
            base_states: s.value(pass.base).clone(),
            token_ids: tokens.to_vec(),
            pad_mask: vec![false; tokens.len()],
        })
    }

    /// Evaluation-mode decoder pass; returns the trace of the last position.
    pub fn decode_step(
        &self,
        prefix: &[TokenId],
        encoded: &EncodedSentence,
        ctx: &ContextState,
        gate: GateOverride,
    ) -> Result<DecoderStepTrace> {
        if prefix.is_empty() {
            return Err(Error::contract("decode step with an empty prefix"));
        }
        let mut s = Session::eval(&self.store);
        let memory = s.constant(encoded.states.clone());
        let pass = self.decode_graph(&mut s, prefix, memory, ctx.target(), gate)?;
        Ok(step_trace(&s, &pass, prefix.len() - 1))
    }

    /// Pre-integration decoder states for `tokens` under teacher forcing,
    /// one row per token: row `i` is the state that predicts `tokens[i]`.
    pub fn teacher_forced_states(&self, tokens: &[TokenId], encoded: &EncodedSentence) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::contract("teacher forcing over an empty sequence"));
        }
        let mut prefix = Vec::with_capacity(tokens.len());
        prefix.push(BOS);
        prefix.extend_from_slice(&tokens[..tokens.len() - 1]);
        let mut s = Session::eval(&self.store);
        let memory = s.constant(encoded.states.clone());
        let (hidden, _) = self.base.decode(&mut s, &self.cfg, &self.positions, &prefix, memory)?;
        Ok(s.value(hidden).clone())
    }

    /// Source-cache entry for an encoded sentence.
    pub fn source_entry(&self, encoded: &EncodedSentence) -> Result<CacheEntry> {
        CacheEntry::new(encoded.token_ids.clone(), encoded.base_states.clone())
    }

    /// Target-cache entry for a finished translation (no BOS or EOS), or
    /// `None` for an empty output.
    pub fn target_entry(&self, output: &[TokenId], encoded: &EncodedSentence) -> Result<Option<CacheEntry>> {
        if output.is_empty() {
            return Ok(None);
        }
        let states = self.teacher_forced_states(output, encoded)?;
        CacheEntry::new(output.to_vec(), states).map(Some)
    }
}

fn group_rng(seed: u64, group: ParamGroup) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(group as u64 + 1);
    rng
}

/// Reads row `t` of every quantity in a decoder pass.
pub fn step_trace(s: &Session, pass: &DecoderPass, t: usize) -> DecoderStepTrace {
    let row = |v: Var| s.value(v).row(t).to_vec();
    let copy = pass.copy.as_ref();
    DecoderStepTrace {
        step: t,
        hidden: row(pass.hidden),
        integrated: row(pass.integrated),
        doc_context: pass.han.as_ref().map(|h| row(h.doc_context)),
        gate: pass.han.as_ref().map(|h| row(h.gate)),
        source_context: copy.map(|c| row(c.source_context)),
        p_copy: copy.map_or(0.0, |c| s.value(c.p_copy).at(t, 0)),
        attention: pass.han.as_ref().map(|h| AttentionTrace::at_position(s, &h.trace, t)),
        token_alpha: copy.map(|c| row(c.token_alpha)),
        p_vocab: row(pass.p_vocab),
        alpha: copy.map(|c| row(c.alpha)),
        p_w: row(pass.output),
    }
}
