//! Self-checks that exercise the whole model on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{run_grad_check, GradCheckReport};
use crate::context::ContextState;
use crate::error::Result;
use crate::model::{GateOverride, Model, Variant};
use crate::params::{GroupSet, StoreGradCheck};
use crate::transformer::{cross_entropy, mean_cross_entropy, ModelConfig};
use crate::vocab::{TokenId, BOS, EOS, NUM_RESERVED};

/// Dimensions of the gradient-check model.
pub fn grad_check_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_layers: 1,
        heads: 2,
        d_ff: 16,
        vocab_src: 13,
        vocab_tgt: 13,
        dropout: 0.0,
        max_len: 32,
        copy_exclude_special: true,
    }
}

#[derive(Debug, Clone)]
pub struct CopyStepCheck {
    pub report: GradCheckReport,
    pub parameters: usize,
    /// Name of the parameter holding the largest error.
    pub worst_param: Option<String>,
}

/// Random non-special tokens.
pub fn random_sentence(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<TokenId> {
    (0..len)
        .map(|_| rng.gen_range(NUM_RESERVED..vocab) as TokenId)
        .collect()
}

/// Builds a copy model with two cached sentence pairs and checks the
/// gradient of a smoothed cross-entropy over one target sentence with
/// respect to every parameter in `groups`.
pub fn copy_step_grad_check(
    cfg: ModelConfig,
    groups: GroupSet,
    seed: u64,
    step: f64,
    tol: f64,
) -> Result<CopyStepCheck> {
    let mut model = Model::new(cfg.clone(), Variant::Copy, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    // Move biases and gains off their symmetric initial values.
    for id in model.store.ids().collect::<Vec<_>>() {
        for x in model.store.get_mut(id).tensor.data_mut() {
            *x += rng.gen_range(-0.1..0.1);
        }
    }
    let mut ctx = ContextState::new(2);
    for _ in 0..2 {
        let (ls, lt) = (rng.gen_range(2..5), rng.gen_range(2..5));
        let src = random_sentence(&mut rng, cfg.vocab_src, ls);
        let tgt = random_sentence(&mut rng, cfg.vocab_tgt, lt);
        let enc = model.encode(&src, &ctx)?;
        let entry = model.target_entry(&tgt, &enc)?.expect("non-empty");
        ctx.push_source(model.source_entry(&enc)?);
        ctx.push_target(entry);
    }
    let src = random_sentence(&mut rng, cfg.vocab_src, 4);
    let tgt = random_sentence(&mut rng, cfg.vocab_tgt, 3);
    let mut prefix = vec![BOS];
    prefix.extend(&tgt);
    let gold: Vec<usize> = tgt.iter().chain([&EOS]).map(|&t| t as usize).collect();

    let m = &model;
    let f = |s: &mut crate::params::Session| {
        let enc = m.encode_graph(s, &src, ctx.source())?;
        let dec = m.decode_graph(s, &prefix, enc.states, ctx.target(), GateOverride::Learned)?;
        let ce = cross_entropy(&mut s.graph, dec.output, &gold, 0.1)?;
        Ok(mean_cross_entropy(&mut s.graph, &ce))
    };
    let mut store = model.store.clone();
    let parameters = store.num_scalars(groups);
    let mut target = StoreGradCheck::new(&mut store, groups, f);
    let report = run_grad_check(&mut target, step, tol)?;
    let worst_param = report.worst.map(|(t, _)| target.param_name(t).to_string());
    Ok(CopyStepCheck {
        report,
        parameters,
        worst_param,
    })
}
