//! Staged training: the sentence-level base, then context layers with the
//! base frozen, then the target-side context together with the copy gate.

mod optim;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::context::{CacheEntry, ContextState};
use crate::corpus::{make_batches, BatchMode, DocumentCorpus, Example};
use crate::decode::{translate_sentence, update_context, SearchConfig};
use crate::error::{Error, Result};
use crate::model::{GateOverride, Model, Variant};
use crate::params::{DropoutState, GroupSet, ParamGroup, Session};
use crate::transformer::cross_entropy;
use crate::vocab::{Vocabulary, BOS, EOS};

pub use optim::{Adam, AdamConfig, LrSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Base,
    HanEncoder,
    HanDecoder,
    HanJoint,
    Copy,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Base, Stage::HanEncoder, Stage::HanDecoder, Stage::HanJoint, Stage::Copy];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::HanEncoder => "han-encoder",
            Stage::HanDecoder => "han-decoder",
            Stage::HanJoint => "han-joint",
            Stage::Copy => "copy",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Stage::Base => Variant::Sentence,
            Stage::HanEncoder => Variant::HanEncoder,
            Stage::HanDecoder => Variant::HanDecoder,
            Stage::HanJoint => Variant::HanJoint,
            Stage::Copy => Variant::Copy,
        }
    }

    /// Groups updated when the rest is frozen.
    pub fn trained_groups(self) -> GroupSet {
        match self {
            Stage::Base => GroupSet::of(&[ParamGroup::Base]),
            Stage::HanEncoder => GroupSet::of(&[ParamGroup::HanEncoder]),
            Stage::HanDecoder | Stage::HanJoint => GroupSet::of(&[ParamGroup::HanDecoder]),
            Stage::Copy => GroupSet::of(&[ParamGroup::HanDecoder, ParamGroup::Copy]),
        }
    }

    /// Groups the incoming checkpoint must already have.
    pub fn required_groups(self) -> GroupSet {
        match self {
            Stage::HanJoint | Stage::Copy => GroupSet::of(&[ParamGroup::Base, ParamGroup::HanEncoder]),
            _ => GroupSet::of(&[ParamGroup::Base]),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = if s == "joint" { "han-joint" } else { s };
        Stage::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown training stage {s:?}")))
    }
}

/// Where the cached previous translations come from during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextSource {
    /// Reference translations.
    #[default]
    Gold,
    /// Greedy outputs of the model being tuned, refreshed every epoch.
    Generated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Target tokens per batch, EOS included.
    pub max_tokens: usize,
    pub max_len: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Previous sentences kept as context.
    pub n_context: usize,
    /// Update every group of the variant instead of only the stage's own.
    pub full_finetune: bool,
    pub context_source: ContextSource,
    /// Copy stage only: epochs trained with the copy probability held at
    /// `gate_warmup_value`, so the copy attention learns before the gate.
    pub gate_warmup_epochs: usize,
    pub gate_warmup_value: f64,
}

impl TrainConfig {
    pub fn base() -> Self {
        TrainConfig {
            stage: Stage::Base,
            epochs: 15,
            max_tokens: 96,
            max_len: 64,
            schedule: LrSchedule::InverseSqrt { factor: 0.25, warmup: 200 },
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            seed: 0,
            n_context: 1,
            full_finetune: false,
            context_source: ContextSource::Gold,
            gate_warmup_epochs: 0,
            gate_warmup_value: 0.8,
        }
    }

    pub fn finetune(stage: Stage) -> Self {
        TrainConfig {
            stage,
            epochs: 2,
            schedule: LrSchedule::Constant { lr: 1e-3 },
            ..TrainConfig::base()
        }
    }

    pub fn trainable(&self) -> GroupSet {
        if self.full_finetune {
            self.stage.variant().groups()
        } else {
            self.stage.trained_groups()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("label smoothing {} not in [0, 1)", self.label_smoothing)));
        }
        if self.max_len == 0 || self.max_tokens <= self.max_len {
            return Err(Error::Config("max_tokens must exceed max_len".into()));
        }
        Ok(())
    }
}

/// One validation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    /// 0 is the model before any update.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Mean copy probability over validation positions where the copy path
    /// is open.
    pub mean_p_copy: Option<f64>,
}

impl EpochRecord {
    /// `stage TAB epoch TAB train_loss TAB val_loss TAB mean_p_copy`
    pub fn log_line(&self) -> String {
        let opt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.6}"));
        format!(
            "{}\t{}\t{}\t{:.6}\t{}",
            self.stage,
            self.epoch,
            opt(self.train_loss),
            self.val_loss,
            opt(self.mean_p_copy)
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation loss among trained epochs, or the prepared model for
    /// zero epochs.
    pub model: Model,
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    /// Set when a non-finite loss stopped training; `model` then holds the
    /// last finite parameters.
    pub aborted: Option<String>,
}

impl TrainOutcome {
    pub fn log(&self) -> String {
        self.records.iter().map(|r| r.log_line() + "\n").collect()
    }
}

pub struct TrainData<'a> {
    pub train: &'a DocumentCorpus,
    pub valid: &'a DocumentCorpus,
    pub src_vocab: &'a Vocabulary,
    pub tgt_vocab: &'a Vocabulary,
}

/// Checks the incoming checkpoint and adds the stage's groups.
pub fn prepare(model: &Model, stage: Stage, seed: u64) -> Result<Model> {
    let have = model.store.groups();
    if let Some(missing) = stage.required_groups().iter().find(|g| !have.contains(*g)) {
        return Err(Error::Config(format!(
            "stage {stage} needs a checkpoint with {missing} parameters"
        )));
    }
    let mut m = model.clone();
    m.extend_to(stage.variant(), seed)?;
    Ok(m)
}

/// Caches seen by each sentence, keyed by (document, position).
type Contexts = BTreeMap<(usize, usize), (Vec<CacheEntry>, Vec<CacheEntry>)>;

/// Runs the model over each document in order, recording the caches every
/// sentence would be translated with.
fn build_contexts(model: &Model, examples: &[&Example], n: usize, source: ContextSource) -> Result<Contexts> {
    let mut docs: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
    for ex in examples {
        docs.entry(ex.doc).or_default().push(ex);
    }
    let mut out = Contexts::new();
    for (d, mut sents) in docs {
        sents.sort_by_key(|e| e.position);
        let mut ctx = ContextState::new(n);
        for ex in sents {
            out.insert((d, ex.position), (ctx.source().to_vec(), ctx.target().to_vec()));
            let enc = model.encode(&ex.src, &ctx)?;
            let output = match source {
                ContextSource::Gold => ex.tgt.clone(),
                ContextSource::Generated => translate_sentence(model, &enc, &ctx, &SearchConfig::default(), false)?.tokens,
            };
            update_context(model, &mut ctx, &enc, &output)?;
        }
    }
    Ok(out)
}

struct BatchLoss {
    /// Mean over target tokens.
    loss: Var,
    tokens: usize,
    p_copy: Vec<f64>,
}

fn batch_loss(
    model: &Model,
    s: &mut Session,
    batch: &[Example],
    contexts: Option<&Contexts>,
    smoothing: f64,
    gate: GateOverride,
) -> Result<BatchLoss> {
    let mut total: Option<Var> = None;
    let mut tokens = 0;
    let mut p_copy = Vec::new();
    for ex in batch {
        let (src_ctx, tgt_ctx) = match contexts.and_then(|c| c.get(&(ex.doc, ex.position))) {
            Some((a, b)) => (a.as_slice(), b.as_slice()),
            None => (&[][..], &[][..]),
        };
        let enc = model.encode_graph(s, &ex.src, src_ctx)?;
        let mut prefix = Vec::with_capacity(ex.tgt.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(&ex.tgt);
        let gold: Vec<usize> = ex.tgt.iter().chain([&EOS]).map(|&t| t as usize).collect();
        let dec = model.decode_graph(s, &prefix, enc.states, tgt_ctx, gate)?;
        if let Some(c) = &dec.copy {
            p_copy.extend_from_slice(s.value(c.p_copy).data());
        }
        let ce = cross_entropy(&mut s.graph, dec.output, &gold, smoothing)?;
        tokens += ce.positions;
        total = Some(match total {
            Some(t) => s.graph.add(t, ce.total)?,
            None => ce.total,
        });
    }
    let total = total.ok_or_else(|| Error::contract("empty batch"))?;
    let loss = s.graph.scale(total, 1.0 / tokens as f64);
    Ok(BatchLoss { loss, tokens, p_copy })
}

struct Evaluation {
    loss: f64,
    mean_p_copy: Option<f64>,
}

fn evaluate(model: &Model, batches: &[Vec<Example>], contexts: Option<&Contexts>) -> Result<Evaluation> {
    let (mut sum, mut tokens) = (0.0, 0);
    let mut p_copy = Vec::new();
    for batch in batches {
        let mut s = Session::eval(&model.store);
        let b = batch_loss(model, &mut s, batch, contexts, 0.0, GateOverride::Learned)?;
        sum += s.value(b.loss).item()? * b.tokens as f64;
        tokens += b.tokens;
        p_copy.extend(b.p_copy);
    }
    let mean_p_copy = (!p_copy.is_empty()).then(|| p_copy.iter().sum::<f64>() / p_copy.len() as f64);
    Ok(Evaluation {
        loss: sum / tokens.max(1) as f64,
        mean_p_copy,
    })
}

fn sub_seed(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const SHUFFLE_STREAM: u64 = 100;
const DROPOUT_STREAM: u64 = 200;

struct Prepared {
    mode: BatchMode,
    contexts_needed: bool,
}

fn prepared(stage: Stage) -> Prepared {
    match stage {
        Stage::Base => Prepared {
            mode: BatchMode::Sentence,
            contexts_needed: false,
        },
        _ => Prepared {
            mode: BatchMode::DocumentOrdered,
            contexts_needed: true,
        },
    }
}

fn contexts_for(model: &Model, batches: &[Vec<Example>], cfg: &TrainConfig, needed: bool) -> Result<Option<Contexts>> {
    if !needed {
        return Ok(None);
    }
    let examples: Vec<&Example> = batches.iter().flatten().collect();
    build_contexts(model, &examples, cfg.n_context, cfg.context_source).map(Some)
}

/// Trains one stage. The incoming model must carry the stage's required
/// groups; the stage's own groups are added when missing.
pub fn train_stage(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = prepare(model, cfg.stage, cfg.seed)?;
    let plan = prepared(cfg.stage);
    let trainable = cfg.trainable();
    let batch_set = |corpus: &DocumentCorpus, mode, seed| {
        make_batches(corpus, data.src_vocab, data.tgt_vocab, mode, cfg.max_tokens, cfg.max_len, seed)
    };
    let valid = batch_set(data.valid, BatchMode::DocumentOrdered, 0)?.batches;
    let gold_valid = TrainConfig {
        context_source: ContextSource::Gold,
        ..cfg.clone()
    };
    let mut valid_ctx = contexts_for(&model, &valid, &gold_valid, plan.contexts_needed)?;
    let initial = evaluate(&model, &valid, valid_ctx.as_ref())?;
    let mut records = vec![EpochRecord {
        stage: cfg.stage,
        epoch: 0,
        train_loss: None,
        val_loss: initial.loss,
        mean_p_copy: initial.mean_p_copy,
    }];
    log::info!("{}", records[0].log_line());
    let mut adam = Adam::new(cfg.adam, model.store.len());
    let mut shuffle = sub_seed(cfg.seed, SHUFFLE_STREAM);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut aborted = None;
    'epochs: for epoch in 1..=cfg.epochs {
        let epoch_seed = rand::Rng::gen::<u64>(&mut shuffle);
        let batches = batch_set(data.train, plan.mode, epoch_seed)?.batches;
        let contexts = contexts_for(&model, &batches, cfg, plan.contexts_needed)?;
        let gate = if cfg.stage == Stage::Copy && epoch <= cfg.gate_warmup_epochs {
            GateOverride::Fixed(cfg.gate_warmup_value)
        } else {
            GateOverride::Learned
        };
        let (mut loss_sum, mut loss_tokens) = (0.0, 0);
        for batch in &batches {
            let step = adam.steps() + 1;
            let dropout = DropoutState {
                rate: model.cfg.dropout,
                rng: sub_seed(cfg.seed ^ step, DROPOUT_STREAM),
            };
            let mut s = Session::new(&model.store, trainable, Some(dropout));
            let b = batch_loss(&model, &mut s, batch, contexts.as_ref(), cfg.label_smoothing, gate)?;
            let loss = s.value(b.loss).item()?;
            let grads = s.param_grads(&s.graph.backward(b.loss)?);
            drop(s);
            if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|x| !x.is_finite())) {
                let msg = format!("non-finite loss or gradient in stage {} epoch {epoch} step {step}", cfg.stage);
                log::error!("{msg}");
                aborted = Some(msg);
                break 'epochs;
            }
            adam.step(&mut model.store, &grads, cfg.schedule.rate(step, model.cfg.d_model));
            loss_sum += loss * b.tokens as f64;
            loss_tokens += b.tokens;
        }
        if cfg.full_finetune && plan.contexts_needed {
            valid_ctx = contexts_for(&model, &valid, &gold_valid, true)?;
        }
        let eval = evaluate(&model, &valid, valid_ctx.as_ref())?;
        if !eval.loss.is_finite() {
            let msg = format!("non-finite validation loss in stage {} epoch {epoch}", cfg.stage);
            log::error!("{msg}");
            aborted = Some(msg);
            break;
        }
        let rec = EpochRecord {
            stage: cfg.stage,
            epoch,
            train_loss: Some(loss_sum / loss_tokens.max(1) as f64),
            val_loss: eval.loss,
            mean_p_copy: eval.mean_p_copy,
        };
        log::info!("{}", rec.log_line());
        records.push(rec);
        if best.as_ref().is_none_or(|(l, _, _)| eval.loss < *l) {
            best = Some((eval.loss, epoch, model.clone()));
        }
    }
    let (model, best_epoch) = match (aborted.is_some(), best) {
        (false, Some((_, e, m))) => (m, Some(e)),
        (_, b) => (model, b.map(|(_, e, _)| e)),
    };
    Ok(TrainOutcome {
        model,
        records,
        best_epoch,
        aborted,
    })
}

/// Sentence-level training of the base parameters.
pub fn train_base(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Base {
        return Err(Error::Config(format!("train_base called with stage {}", cfg.stage)));
    }
    train_stage(model, data, cfg)
}

/// Context-layer fine-tuning with the base frozen.
pub fn finetune_han(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if !matches!(cfg.stage, Stage::HanEncoder | Stage::HanDecoder | Stage::HanJoint) {
        return Err(Error::Config(format!("finetune_han called with stage {}", cfg.stage)));
    }
    train_stage(model, data, cfg)
}

/// Target-side context and copy-gate fine-tuning from a source-context
/// checkpoint.
pub fn finetune_copy(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.stage != Stage::Copy {
        return Err(Error::Config(format!("finetune_copy called with stage {}", cfg.stage)));
    }
    train_stage(model, data, cfg)
}

/// Gradient norm of every parameter over the first training batch of the
/// stage, for parameters that receive a gradient at all.
pub fn first_batch_gradient_norms(model: &Model, data: &TrainData, cfg: &TrainConfig) -> Result<BTreeMap<String, f64>> {
    let model = prepare(model, cfg.stage, cfg.seed)?;
    let plan = prepared(cfg.stage);
    let batches = make_batches(data.train, data.src_vocab, data.tgt_vocab, plan.mode, cfg.max_tokens, cfg.max_len, cfg.seed)?.batches;
    let first = batches.first().ok_or_else(|| Error::contract("no training batches"))?;
    let contexts = contexts_for(&model, &batches, cfg, plan.contexts_needed)?;
    let mut s = Session::new(&model.store, cfg.trainable(), None);
    let b = batch_loss(&model, &mut s, first, contexts.as_ref(), cfg.label_smoothing, GateOverride::Learned)?;
    let grads = s.param_grads(&s.graph.backward(b.loss)?);
    Ok(grads
        .into_iter()
        .map(|(id, g)| (model.store.get(id).name.clone(), g.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("joint".parse::<Stage>().unwrap(), Stage::HanJoint);
        assert!("decoder".parse::<Stage>().is_err());
    }

    #[test]
    fn log_line_format() {
        let r = EpochRecord {
            stage: Stage::Copy,
            epoch: 2,
            train_loss: Some(1.5),
            val_loss: 1.25,
            mean_p_copy: None,
        };
        assert_eq!(r.log_line(), "copy\t2\t1.500000\t1.250000\t-");
    }

    #[test]
    fn stage_groups() {
        assert_eq!(Stage::Copy.trained_groups(), GroupSet::of(&[ParamGroup::HanDecoder, ParamGroup::Copy]));
        let mut cfg = TrainConfig::finetune(Stage::HanJoint);
        assert_eq!(cfg.trainable(), GroupSet::of(&[ParamGroup::HanDecoder]));
        cfg.full_finetune = true;
        assert_eq!(cfg.trainable(), Variant::HanJoint.groups());
    }
}
