//! Shared inputs for the benchmarks.

use lexcopy::corpus::synth::{generate, SynthConfig};
use lexcopy::corpus::Sentence;
use lexcopy::diagnostics::random_sentence;
use lexcopy::{ContextState, Model, ModelConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn toy_model(variant: Variant) -> Model {
    Model::new(ModelConfig::toy(60, 60), variant, 0).expect("toy model")
}

/// A cache holding `n` random sentence pairs.
pub fn filled_context(model: &Model, n: usize) -> ContextState {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = ContextState::new(n);
    for _ in 0..n {
        let src = random_sentence(&mut rng, model.cfg.vocab_src, 8);
        let tgt = random_sentence(&mut rng, model.cfg.vocab_tgt, 8);
        let enc = model.encode(&src, &ctx).expect("encode");
        let entry = model.target_entry(&tgt, &enc).expect("target entry").expect("non-empty");
        ctx.push_source(model.source_entry(&enc).expect("source entry"));
        ctx.push_target(entry);
    }
    ctx
}

/// Target side of a synthetic corpus.
pub fn target_documents(n_docs: usize) -> Vec<Vec<Sentence>> {
    let (corpus, _) = generate(&SynthConfig {
        n_docs,
        ..SynthConfig::default()
    });
    corpus.documents.into_iter().map(|d| d.target).collect()
}
