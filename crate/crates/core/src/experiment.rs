//! End-to-end synthetic cohesion experiment: generate data, train the base,
//! fine-tune the context and copy stages, translate the test documents and
//! score every system.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::synth::{generate, Lexicon, SynthConfig};
use crate::corpus::{build_vocab, DocumentCorpus, Sentence, Side};
use crate::decode::{translate_document, SearchConfig};
use crate::error::Result;
use crate::metrics::{bleu4, consistency_rate, lc_score, stopwords_sha256, Smoothing};
use crate::model::{Model, Variant};
use crate::train::{finetune_copy, finetune_han, train_base, Stage, TrainConfig, TrainData, TrainOutcome};
use crate::transformer::ModelConfig;
use crate::vocab::Vocabulary;

/// A named, stable seed derived from the run seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(name.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub train_docs: usize,
    pub valid_docs: usize,
    pub test_docs: usize,
    pub n_concepts: usize,
    pub doc_len: usize,
    /// Mark the synonym in each document's first source sentence.
    pub cue: bool,
    pub n_context: usize,
    /// Vocabulary sizes are filled in from the data.
    pub model: ModelConfig,
    pub base: TrainConfig,
    pub finetune: TrainConfig,
    pub beam: usize,
    pub length_penalty: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            train_docs: 200,
            valid_docs: 40,
            test_docs: 50,
            n_concepts: 10,
            doc_len: 4,
            cue: true,
            n_context: 1,
            model: ModelConfig::toy(0, 0),
            base: TrainConfig::base(),
            finetune: TrainConfig {
                epochs: 6,
                gate_warmup_epochs: 3,
                ..TrainConfig::finetune(Stage::HanEncoder)
            },
            beam: 1,
            length_penalty: 0.0,
        }
    }
}

impl ExperimentConfig {
    fn search(&self) -> SearchConfig {
        SearchConfig {
            beam: self.beam,
            length_penalty: self.length_penalty,
            ..SearchConfig::default()
        }
    }

    fn stage_config(&self, stage: Stage, name: &str) -> TrainConfig {
        let template = if stage == Stage::Base { &self.base } else { &self.finetune };
        TrainConfig {
            stage,
            seed: sub_seed(self.seed, name),
            n_context: self.n_context,
            ..template.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemScores {
    pub system: String,
    pub bleu: Option<f64>,
    pub lc: f64,
    pub lc_delta: f64,
    pub consistency: f64,
    pub compared: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub train: DocumentCorpus,
    pub valid: DocumentCorpus,
    pub test: DocumentCorpus,
    pub lexicon: Lexicon,
}

pub fn make_splits(cfg: &ExperimentConfig) -> Splits {
    let split = |n_docs, name| {
        generate(&SynthConfig {
            n_docs,
            doc_len: cfg.doc_len,
            n_concepts: cfg.n_concepts,
            seed: sub_seed(cfg.seed, name),
            cue: cfg.cue,
        })
    };
    let (train, meta) = split(cfg.train_docs, "data-train");
    let (valid, _) = split(cfg.valid_docs, "data-valid");
    let (test, _) = split(cfg.test_docs, "data-test");
    Splits {
        train,
        valid,
        test,
        lexicon: meta.lexicon,
    }
}

pub struct StageRun {
    pub name: &'static str,
    pub outcome: TrainOutcome,
}

pub struct ExperimentResult {
    pub splits: Splits,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub stages: Vec<StageRun>,
    /// Test translations per system, in table order after the reference.
    pub outputs: Vec<(String, Vec<Vec<Sentence>>)>,
    pub scores: Vec<SystemScores>,
}

impl ExperimentResult {
    pub fn system(&self, name: &str) -> Option<&SystemScores> {
        self.scores.iter().find(|s| s.system == name)
    }

    pub fn model(&self, stage: &str) -> Option<&Model> {
        self.stages.iter().find(|s| s.name == stage).map(|s| &s.outcome.model)
    }

    pub fn training_log(&self) -> String {
        self.stages.iter().map(|s| s.outcome.log()).collect()
    }

    /// Tab-separated comparison table.
    pub fn table(&self) -> String {
        let mut out = String::from("system\tbleu\tlc_stem\tlc_delta\tconsistency\tcompared\tdropped\n");
        for s in &self.scores {
            let bleu = s.bleu.map_or("-".to_string(), |b| format!("{b:.2}"));
            let _ = writeln!(
                out,
                "{}\t{bleu}\t{:.2}\t{:+.2}\t{:.4}\t{}\t{}",
                s.system, s.lc, s.lc_delta, s.consistency, s.compared, s.dropped
            );
        }
        let _ = writeln!(out, "# stopwords sha256 {}", stopwords_sha256());
        out
    }
}

/// Translates every document of `corpus` with `model`.
pub fn translate_corpus(
    model: &Model,
    corpus: &DocumentCorpus,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    n_context: usize,
    search: &SearchConfig,
) -> Result<Vec<Vec<Sentence>>> {
    corpus
        .documents
        .iter()
        .map(|doc| {
            let sources: Vec<_> = doc.source.iter().map(|s| src_vocab.encode(s)).collect();
            let out = translate_document(model, &sources, n_context, search, false)?;
            Ok(out.iter().map(|t| tgt_vocab.decode(&t.tokens)).collect())
        })
        .collect()
}

pub fn score_system(system: &str, output: &[Vec<Sentence>], reference: &[Vec<Sentence>], lexicon: &Lexicon) -> Result<SystemScores> {
    let lc = lc_score(output)?.corpus;
    let reference_lc = lc_score(reference)?.corpus;
    let consistency = consistency_rate(output, lexicon);
    let bleu = bleu4(output, reference, Smoothing::None)?.score;
    Ok(SystemScores {
        system: system.to_string(),
        bleu: Some(bleu),
        lc,
        lc_delta: lc - reference_lc,
        consistency: consistency.rate,
        compared: consistency.compared,
        dropped: consistency.dropped,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let splits = make_splits(cfg);
    let src_vocab = build_vocab(&splits.train, Side::Source, 10_000, 1)?;
    let tgt_vocab = build_vocab(&splits.train, Side::Target, 10_000, 1)?;
    let data = TrainData {
        train: &splits.train,
        valid: &splits.valid,
        src_vocab: &src_vocab,
        tgt_vocab: &tgt_vocab,
    };
    let model_cfg = ModelConfig {
        vocab_src: src_vocab.len(),
        vocab_tgt: tgt_vocab.len(),
        ..cfg.model.clone()
    };
    let init = Model::new(model_cfg, Variant::Sentence, sub_seed(cfg.seed, "init"))?;
    let base = train_base(&init, &data, &cfg.stage_config(Stage::Base, "train-base"))?;
    let han_enc = finetune_han(&base.model, &data, &cfg.stage_config(Stage::HanEncoder, "train-han-encoder"))?;
    let joint = finetune_han(&han_enc.model, &data, &cfg.stage_config(Stage::HanJoint, "train-han-joint"))?;
    let copy = finetune_copy(&han_enc.model, &data, &cfg.stage_config(Stage::Copy, "train-copy"))?;
    let stages = vec![
        StageRun { name: "base", outcome: base },
        StageRun { name: "han-encoder", outcome: han_enc },
        StageRun { name: "han-joint", outcome: joint },
        StageRun { name: "copy", outcome: copy },
    ];
    for s in &stages {
        if let Some(msg) = &s.outcome.aborted {
            return Err(crate::error::Error::Numerical(msg.clone()));
        }
    }

    let reference: Vec<Vec<Sentence>> = splits.test.documents.iter().map(|d| d.target.clone()).collect();
    let reference_lc = lc_score(&reference)?.corpus;
    let reference_consistency = consistency_rate(&reference, &splits.lexicon);
    let mut scores = vec![SystemScores {
        system: "reference".into(),
        bleu: None,
        lc: reference_lc,
        lc_delta: 0.0,
        consistency: reference_consistency.rate,
        compared: reference_consistency.compared,
        dropped: reference_consistency.dropped,
    }];
    let mut outputs = Vec::new();
    let search = cfg.search();
    for (system, stage) in [("sentence", "base"), ("han-joint", "han-joint"), ("copy", "copy")] {
        let model = &stages.iter().find(|s| s.name == stage).expect("stage ran").outcome.model;
        let out = translate_corpus(model, &splits.test, &src_vocab, &tgt_vocab, cfg.n_context, &search)?;
        scores.push(score_system(system, &out, &reference, &splits.lexicon)?);
        outputs.push((system.to_string(), out));
    }
    Ok(ExperimentResult {
        splits,
        src_vocab,
        tgt_vocab,
        stages,
        outputs,
        scores,
    })
}
