use lexcopy::corpus::synth::{generate, SynthConfig};
use lexcopy::corpus::{build_vocab, DocumentCorpus, Side};
use lexcopy::train::{
    finetune_copy, finetune_han, first_batch_gradient_norms, prepare, train_base, Stage, TrainConfig, TrainData,
};
use lexcopy::{Error, Model, ModelConfig, Variant, Vocabulary};

struct Fixture {
    train: DocumentCorpus,
    valid: DocumentCorpus,
    src: Vocabulary,
    tgt: Vocabulary,
}

impl Fixture {
    fn new() -> Self {
        let corpus = |n_docs, seed| {
            generate(&SynthConfig {
                n_docs,
                n_concepts: 3,
                doc_len: 3,
                seed,
                cue: true,
            })
            .0
        };
        let train = corpus(6, 1);
        let valid = corpus(2, 2);
        let src = build_vocab(&train, Side::Source, 1000, 1).unwrap();
        let tgt = build_vocab(&train, Side::Target, 1000, 1).unwrap();
        Fixture { train, valid, src, tgt }
    }

    fn data(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            valid: &self.valid,
            src_vocab: &self.src,
            tgt_vocab: &self.tgt,
        }
    }

    fn model(&self, variant: Variant) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_layers: 1,
            ..ModelConfig::toy(self.src.len(), self.tgt.len())
        };
        Model::new(cfg, variant, 0).unwrap()
    }
}

fn config(stage: Stage, epochs: usize) -> TrainConfig {
    let template = if stage == Stage::Base { TrainConfig::base() } else { TrainConfig::finetune(stage) };
    TrainConfig {
        stage,
        epochs,
        seed: 3,
        ..template
    }
}

#[test]
fn fine_tuning_touches_only_its_groups() {
    let fx = Fixture::new();
    let base = fx.model(Variant::Sentence);
    let han_enc = prepare(&base, Stage::HanEncoder, 1).unwrap();
    for (stage, from) in [
        (Stage::Base, &base),
        (Stage::HanEncoder, &base),
        (Stage::HanDecoder, &base),
        (Stage::HanJoint, &han_enc),
        (Stage::Copy, &han_enc),
    ] {
        let cfg = config(stage, 1);
        let norms = first_batch_gradient_norms(from, &fx.data(), &cfg).unwrap();
        let prepared = prepare(from, stage, cfg.seed).unwrap();
        let trainable = cfg.trainable();
        assert!(!norms.is_empty(), "{stage}");
        for (name, norm) in &norms {
            let id = prepared.store.lookup(name).unwrap();
            assert!(trainable.contains(prepared.store.get(id).group), "{stage}: {name}");
            assert!(norm.is_finite());
        }
        let expected = prepared.store.iter().filter(|(_, p)| trainable.contains(p.group)).count();
        assert_eq!(norms.len(), expected, "{stage}");
        assert!(norms.values().any(|&n| n > 1e-8), "{stage}");
    }
}

#[test]
fn frozen_groups_do_not_move() {
    let fx = Fixture::new();
    let base = train_base(&fx.model(Variant::Sentence), &fx.data(), &config(Stage::Base, 1)).unwrap();
    let han = finetune_han(&base.model, &fx.data(), &config(Stage::HanEncoder, 1)).unwrap();
    let changed = han.model.store.changed_params(&base.model.store);
    assert!(!changed.is_empty());
    assert!(changed.iter().all(|n| n.starts_with("han_enc")), "{changed:?}");
    let copy = finetune_copy(&han.model, &fx.data(), &config(Stage::Copy, 1)).unwrap();
    for (id, p) in han.model.store.iter() {
        assert_eq!(copy.model.store.get(id).tensor, p.tensor, "{}", p.name);
    }
}

#[test]
fn training_is_reproducible() {
    let fx = Fixture::new();
    let init = fx.model(Variant::Sentence);
    let a = train_base(&init, &fx.data(), &config(Stage::Base, 2)).unwrap();
    let b = train_base(&init, &fx.data(), &config(Stage::Base, 2)).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.model.store, b.model.store);
    assert_eq!(a.records.len(), 3);
    assert!(a.best_epoch.unwrap() >= 1);
    assert!(a.aborted.is_none());
}

#[test]
fn zero_epochs_only_validates() {
    let fx = Fixture::new();
    let base = fx.model(Variant::Sentence);
    let out = finetune_han(&base, &fx.data(), &config(Stage::HanDecoder, 0)).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].epoch, 0);
    assert!(out.records[0].train_loss.is_none());
    assert_eq!(out.best_epoch, None);
    assert_eq!(out.model.store, prepare(&base, Stage::HanDecoder, 3).unwrap().store);
}

#[test]
fn later_stages_need_a_source_context_checkpoint() {
    let fx = Fixture::new();
    let base = fx.model(Variant::Sentence);
    for stage in [Stage::HanJoint, Stage::Copy] {
        let run = if stage == Stage::Copy { finetune_copy } else { finetune_han };
        assert!(matches!(run(&base, &fx.data(), &config(stage, 1)), Err(Error::Config(_))), "{stage}");
    }
    assert!(matches!(finetune_han(&base, &fx.data(), &config(Stage::Copy, 1)), Err(Error::Config(_))));
    assert!(matches!(train_base(&base, &fx.data(), &config(Stage::HanEncoder, 1)), Err(Error::Config(_))));
}

#[test]
fn copy_stage_reports_gate_usage() {
    let fx = Fixture::new();
    let han = prepare(&fx.model(Variant::Sentence), Stage::HanEncoder, 1).unwrap();
    let cfg = TrainConfig {
        gate_warmup_epochs: 1,
        ..config(Stage::Copy, 2)
    };
    let out = finetune_copy(&han, &fx.data(), &cfg).unwrap();
    for r in &out.records {
        let p = r.mean_p_copy.unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert_eq!(out.log().lines().count(), 3);
}
