//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when any
//! criterion fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use lexcopy::copy::copy_attention_weights;
use lexcopy::corpus::{load_corpus, write_corpus};
use lexcopy::decode::{beam_search, greedy_search, Hypothesis};
use lexcopy::diagnostics::{copy_step_grad_check, grad_check_config, random_sentence};
use lexcopy::han::AttentionTrace;
use lexcopy::metrics::{bleu4, bleu4_sentences, lc_score, Smoothing};
use lexcopy::vocab::{BOS, EOS, NUM_RESERVED};
use lexcopy::{ContextState, EncodedSentence, GateOverride, GroupSet, Model, ModelConfig, TokenId, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit_secs: u64, check: Check) -> Check {
    let note = |d: String| format!("{d}; {:.1}s of {limit_secs}s", elapsed.as_secs_f64());
    match check {
        Ok(d) if elapsed.as_secs() <= limit_secs => Ok(note(d)),
        Ok(d) | Err(d) => Err(note(d)),
    }
}

fn model_config(heads: usize) -> ModelConfig {
    ModelConfig {
        heads,
        ..grad_check_config()
    }
}

fn random_context(model: &Model, rng: &mut ChaCha8Rng, n: usize) -> ContextState {
    let mut ctx = ContextState::new(n);
    for _ in 0..n {
        let (ls, lt) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let src = random_sentence(rng, model.cfg.vocab_src, ls);
        let tgt = random_sentence(rng, model.cfg.vocab_tgt, lt);
        let enc = model.encode(&src, &ctx).unwrap();
        let entry = model.target_entry(&tgt, &enc).unwrap().unwrap();
        ctx.push_source(model.source_entry(&enc).unwrap());
        ctx.push_target(entry);
    }
    ctx
}

/// A random source sentence and decoder prefix, encoded against `ctx`.
fn random_state(model: &Model, rng: &mut ChaCha8Rng, ctx: &ContextState) -> (EncodedSentence, Vec<TokenId>) {
    let len = rng.gen_range(1..6);
    let src = random_sentence(rng, model.cfg.vocab_src, len);
    let mut prefix = vec![BOS];
    let extra = rng.gen_range(0..5);
    prefix.extend(random_sentence(rng, model.cfg.vocab_tgt, extra));
    (model.encode(&src, ctx).unwrap(), prefix)
}

fn distribution_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut steps, mut worst_sum, mut negative) = (0, 0.0f64, 0);
    let mut empty_mismatch = 0;
    for m in 0..50u64 {
        let model = Model::new(model_config([1, 2, 4][m as usize % 3]), Variant::Copy, m).unwrap();
        for _ in 0..20 {
            let n = rng.gen_range(1..4);
            let ctx = random_context(&model, &mut rng, n);
            let (enc, prefix) = random_state(&model, &mut rng, &ctx);
            let step = model.decode_step(&prefix, &enc, &ctx, GateOverride::Learned).unwrap();
            worst_sum = worst_sum.max((step.p_w.iter().sum::<f64>() - 1.0).abs());
            negative += step.p_w.iter().filter(|&&p| p < 0.0).count();
            steps += 1;
        }
        let empty = ContextState::new(2);
        let (enc, prefix) = random_state(&model, &mut rng, &empty);
        let step = model.decode_step(&prefix, &enc, &empty, GateOverride::Learned).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        empty_mismatch += usize::from(bits(&step.p_w) != bits(&step.p_vocab));
    }
    ensure(
        worst_sum <= 1e-9 && negative == 0 && empty_mismatch == 0,
        format!("{steps} steps, max |sum-1| {worst_sum:.1e}, {negative} negative, {empty_mismatch}/50 empty-cache mismatches"),
    )
}

fn softmax(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0f64..3.0).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Copy weights by explicit loops over vocabulary entries, sentences and
/// tokens.
fn naive_alpha(trace: &AttentionTrace, cache: &[Vec<TokenId>], vocab: usize) -> Vec<f64> {
    let heads = trace.sentence_weights.len() as f64;
    let excluded = |t: TokenId| (t as usize) < NUM_RESERVED;
    let mut alpha = vec![0.0; vocab];
    for (w, slot) in alpha.iter_mut().enumerate() {
        for (j, sentence) in cache.iter().enumerate() {
            for (i, &tok) in sentence.iter().enumerate() {
                if tok as usize != w || excluded(tok) {
                    continue;
                }
                let a_j: f64 = trace.sentence_weights.iter().map(|h| h[j]).sum::<f64>() / heads;
                let a_ji: f64 = trace.word_weights.iter().map(|h| h[j][i]).sum::<f64>() / heads;
                *slot += a_j * a_ji;
            }
        }
    }
    let any_excluded = cache.iter().flatten().any(|&t| excluded(t));
    let mass: f64 = alpha.iter().sum();
    if any_excluded && mass > 0.0 {
        alpha.iter_mut().for_each(|a| *a /= mass);
    }
    alpha
}

fn alpha_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vocab = 12;
    let mut worst = 0.0f64;
    for k in 0..100 {
        let heads = [1, 2, 4][k % 3];
        let n = rng.gen_range(1..4);
        let cache: Vec<Vec<TokenId>> = (0..n)
            .map(|_| (0..rng.gen_range(1..6)).map(|_| rng.gen_range(0..vocab) as TokenId).collect())
            .collect();
        let trace = AttentionTrace {
            sentence_weights: (0..heads).map(|_| softmax(&mut rng, n)).collect(),
            word_weights: (0..heads).map(|_| cache.iter().map(|s| softmax(&mut rng, s.len())).collect()).collect(),
        };
        let refs: Vec<&[TokenId]> = cache.iter().map(Vec::as_slice).collect();
        let fast = copy_attention_weights(&trace, &refs, vocab, &|t| (t as usize) < NUM_RESERVED).unwrap();
        let slow = naive_alpha(&trace, &cache, vocab);
        for (a, b) in fast.vocab.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-12, format!("100 traces, max abs diff {worst:.1e}"))
}

fn gradient_fidelity() -> Check {
    let check = copy_step_grad_check(grad_check_config(), GroupSet::ALL, 11, 1e-5, 1e-4).unwrap();
    ensure(
        check.report.passed && check.report.entries_checked == check.parameters,
        format!(
            "{} of {} parameters, max rel err {:.2e} (worst {})",
            check.report.entries_checked,
            check.parameters,
            check.report.max_rel_err,
            check.worst_param.as_deref().unwrap_or("-")
        ),
    )
}

fn reduction_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in 0..50u64 {
        let copy = Model::new(model_config([1, 2, 4][k as usize % 3]), Variant::Copy, 100 + k).unwrap();
        let mut joint = copy.clone();
        joint.set_variant(Variant::HanJoint).unwrap();
        let n = rng.gen_range(1..4);
        let ctx = random_context(&copy, &mut rng, n);
        let (enc, prefix) = random_state(&copy, &mut rng, &ctx);
        let closed = copy.decode_step(&prefix, &enc, &ctx, GateOverride::Fixed(0.0)).unwrap();
        let reference = joint.decode_step(&prefix, &enc, &ctx, GateOverride::Learned).unwrap();
        for (a, b) in closed.p_w.iter().zip(&reference.p_w) {
            worst = worst.max((a - b).abs());
        }
    }
    let mut mismatched = Vec::new();
    for k in 0..10u64 {
        let full = Model::new(model_config(2), Variant::Copy, 200 + k).unwrap();
        let mut sentence = full.clone();
        sentence.set_variant(Variant::Sentence).unwrap();
        let empty = ContextState::new(2);
        let (_, prefix) = random_state(&full, &mut rng, &empty);
        let src = random_sentence(&mut rng, 13, 4);
        let enc = sentence.encode(&src, &empty).unwrap();
        let want = sentence.decode_step(&prefix, &enc, &empty, GateOverride::Learned).unwrap();
        for v in Variant::ALL {
            let mut m = full.clone();
            m.set_variant(v).unwrap();
            let e = m.encode(&src, &empty).unwrap();
            let got = m.decode_step(&prefix, &e, &empty, GateOverride::Learned).unwrap();
            if e.states != enc.states || got.p_w != want.p_w {
                mismatched.push(v.name());
            }
        }
    }
    mismatched.dedup();
    ensure(
        worst <= 1e-12 && mismatched.is_empty(),
        format!("closed gate vs joint max diff {worst:.1e} on 50 states; empty-cache mismatches {mismatched:?}"),
    )
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn read_lines(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect()
}

fn metric_oracles() -> Check {
    let mut docs = vec![Vec::new()];
    for s in read_lines(&fixtures().join("lc5.txt")) {
        if s.is_empty() {
            docs.push(Vec::new());
        } else {
            docs.last_mut().unwrap().push(s);
        }
    }
    let lc = lc_score(&docs).unwrap();
    let lc_ok = lc.per_document == [Some(25.0), Some(37.5), Some(0.0), Some(75.0), None] && lc.corpus == 35.0;
    let hyp = read_lines(&fixtures().join("bleu20.hyp"));
    let refs = read_lines(&fixtures().join("bleu20.ref"));
    // counts [133,95,67,46] / [152,132,112,92], lengths 152 / 151
    let hand = 100.0 * (((133.0f64 / 152.0).ln() + (95.0f64 / 132.0).ln() + (67.0f64 / 112.0).ln() + (46.0f64 / 92.0).ln()) * 0.25).exp();
    let bleu = bleu4_sentences(&hyp, &refs, Smoothing::None).unwrap().score;
    let one = vec![refs.clone()];
    let identity = bleu4(&one, &one, Smoothing::None).unwrap().score;
    ensure(
        lc_ok && (bleu - hand).abs() <= 0.1 && identity == 100.0,
        format!("LC per document {:?} corpus {}; BLEU {bleu:.4} vs hand {hand:.4}; identity {identity}", lc.per_document, lc.corpus),
    )
}

fn normalised_log(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    softmax(rng, n).into_iter().map(f64::ln).collect()
}

/// Every sequence of exactly `len` tokens, best first.
fn exhaustive(lp: &dyn Fn(&[TokenId]) -> Vec<f64>, vocab: usize, len: usize) -> Vec<(f64, Vec<TokenId>)> {
    let mut all = vec![(0.0, vec![BOS])];
    for _ in 0..len {
        let mut next = Vec::new();
        for (s, p) in all {
            let l = lp(&p);
            for (t, lt) in l.iter().enumerate().take(vocab) {
                let mut q = p.clone();
                q.push(t as TokenId);
                next.push((s + lt, q));
            }
        }
        all = next;
    }
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    all
}

fn beam_oracle() -> Check {
    const NO_EOS: TokenId = TokenId::MAX;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut failures = Vec::new();
    for k in 0..100 {
        // per-step distributions: width 2 keeps the true top two
        let steps: Vec<Vec<f64>> = (0..2).map(|_| normalised_log(&mut rng, 3)).collect();
        let factorised = |p: &[TokenId]| steps[p.len() - 1].clone();
        let beam = beam_search(|p| Ok(factorised(p)), BOS, NO_EOS, 2, 2, 0.0).unwrap();
        let truth = exhaustive(&factorised, 3, 2);
        let same = |b: &[Hypothesis], t: &[(f64, Vec<TokenId>)]| {
            b.iter().zip(t).all(|(h, (s, seq))| &h.tokens == seq && (h.log_prob - s).abs() <= 1e-12)
        };
        if !same(&beam, &truth[..2]) {
            failures.push(format!("factorised #{k}"));
        }
        // prefix-dependent distributions: full width is exact
        let table: Vec<Vec<f64>> = (0..4).map(|_| normalised_log(&mut rng, 3)).collect();
        let model = |p: &[TokenId]| table[*p.last().unwrap() as usize % 4].clone();
        let beam = beam_search(|p| Ok(model(p)), BOS, NO_EOS, 3, 2, 0.0).unwrap();
        if !same(&beam, &exhaustive(&model, 3, 2)[..3]) {
            failures.push(format!("full width #{k}"));
        }
    }
    let mut greedy_mismatch = 0;
    for k in 0..100u64 {
        let model = Model::new(model_config(2), Variant::Sentence, 300 + k).unwrap();
        let empty = ContextState::new(1);
        let len = rng.gen_range(1..5);
        let src = random_sentence(&mut rng, 13, len);
        let enc = model.encode(&src, &empty).unwrap();
        let lp = |p: &[TokenId]| {
            let step = model.decode_step(p, &enc, &empty, GateOverride::Learned)?;
            Ok(step.p_w.iter().map(|x| x.ln()).collect())
        };
        let g = greedy_search(lp, BOS, EOS, 8).unwrap();
        let b = beam_search(lp, BOS, EOS, 1, 8, 0.0).unwrap();
        greedy_mismatch += usize::from(b != vec![g]);
    }
    ensure(
        failures.is_empty() && greedy_mismatch == 0,
        format!("width 2 and full width vs exhaustive on 100 tables each, failures {failures:?}; width 1 vs greedy mismatches {greedy_mismatch}/100"),
    )
}

struct Scores {
    bleu: f64,
    lc: f64,
    consistency: f64,
}

fn parse_table(table: &str) -> Result<Vec<(String, Scores)>, String> {
    table
        .lines()
        .skip(1)
        .filter(|l| !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{l:?}: {e}"));
            let bleu = if f[1] == "-" { f64::NAN } else { num(f[1])? };
            Ok((f[0].to_string(), Scores { bleu, lc: num(f[2])?, consistency: num(f[4])? }))
        })
        .collect()
}

fn run_experiment_cli(seed: u64, out: &Path) -> Result<String, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_lexcopy"))
        .args(["experiment", "--profile", "toy", "--seed", &seed.to_string(), "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("experiment exited with {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr)));
    }
    fs::read_to_string(out.join("table.tsv")).map_err(|e| e.to_string())
}

fn cohesion_experiment(table: &Result<String, String>) -> Check {
    let table = table.as_ref().map_err(Clone::clone)?;
    let rows = parse_table(table)?;
    let get = |name: &str| rows.iter().find(|(n, _)| n == name).map(|(_, s)| s).ok_or(format!("no {name} row"));
    let (reference, sentence, copy) = (get("reference")?, get("sentence")?, get("copy")?);
    let gain = 100.0 * (copy.consistency - sentence.consistency);
    let (copy_gap, sentence_gap) = ((copy.lc - reference.lc).abs(), (sentence.lc - reference.lc).abs());
    let bleu_drop = sentence.bleu - copy.bleu;
    ensure(
        gain >= 15.0 && copy_gap <= sentence_gap && bleu_drop <= 1.0,
        format!(
            "consistency {:.4} vs {:.4} (+{gain:.1}pp); LC gap {copy_gap:.2} vs {sentence_gap:.2}; BLEU {:.2} vs {:.2}",
            copy.consistency, sentence.consistency, copy.bleu, sentence.bleu
        ),
    )
}

fn reproducibility(first: &Result<String, String>, scratch: &Path) -> Check {
    let first = first.as_ref().map_err(Clone::clone)?;
    let second = run_experiment_cli(0, &scratch.join("exp-b"))?;
    let tables_match = *first == second;

    let data = scratch.join("data");
    let gen = Command::new(env!("CARGO_BIN_EXE_lexcopy"))
        .args(["gen-synth", "--seed", "0", "--out"])
        .arg(&data)
        .output()
        .map_err(|e| e.to_string())?;
    if !gen.status.success() {
        return Err("gen-synth failed".into());
    }
    let (src, tgt) = (data.join("train.src"), data.join("train.tgt"));
    let loaded = load_corpus(&src, &tgt).map_err(|e| e.to_string())?;
    let (src2, tgt2) = (scratch.join("again.src"), scratch.join("again.tgt"));
    write_corpus(&loaded, &src2, &tgt2).map_err(|e| e.to_string())?;
    let bytes_match = fs::read(&src).unwrap() == fs::read(&src2).unwrap() && fs::read(&tgt).unwrap() == fs::read(&tgt2).unwrap();
    let reload_match = load_corpus(&src2, &tgt2).map_err(|e| e.to_string())? == loaded;
    ensure(
        tables_match && bytes_match && reload_match,
        format!("identical tables {tables_match}; corpus bytes stable {bytes_match}; reload equal {reload_match}"),
    )
}

fn main() {
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |id: &str, name: &str, limit: u64, f: &mut dyn FnMut() -> Check| {
        let start = Instant::now();
        let result = f();
        let result = within(start.elapsed(), limit, result);
        match result {
            Ok(d) => println!("criterion {id} {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {id} {name}: FAIL ({d})");
            }
        }
    };
    report("1", "distribution soundness", 60, &mut distribution_soundness);
    report("2", "copy weight oracle", 60, &mut alpha_oracle);
    report("3", "gradient fidelity", 120, &mut gradient_fidelity);
    report("4", "reduction equivalence", 60, &mut reduction_equivalence);
    let mut first = Err(String::from("not run"));
    report("5", "synthetic cohesion experiment", 1800, &mut || {
        first = run_experiment_cli(0, &scratch.path().join("exp-a"));
        cohesion_experiment(&first)
    });
    report("6", "metric oracles", 60, &mut metric_oracles);
    report("7", "beam oracle", 60, &mut beam_oracle);
    report("8", "reproducibility", 1800, &mut || reproducibility(&first, scratch.path()));
    if failed > 0 {
        println!("acceptance: {failed} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
