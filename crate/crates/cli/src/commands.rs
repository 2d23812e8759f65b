use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lexcopy::corpus::synth::Lexicon;
use lexcopy::corpus::{build_vocab as corpus_vocab, format_side, load_corpus, manifest, parse_corpus, write_corpus, Sentence, Side};
use lexcopy::decode::{trace_tsv, translate_document, SearchConfig, TRACE_HEADER};
use lexcopy::diagnostics::{copy_step_grad_check, grad_check_config};
use lexcopy::experiment::{make_splits, run_experiment, sub_seed};
use lexcopy::metrics::{bleu4, consistency_rate, lc_score, stopwords_sha256, Smoothing};
use lexcopy::train::{train_stage, Stage, TrainConfig, TrainData};
use lexcopy::{checkpoint, GroupSet, Model, ModelConfig, Variant, Vocabulary};
use serde_json::json;

use crate::manifest::RunManifest;
use crate::settings::Settings;

pub struct DataPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub vocab: PathBuf,
    pub out: PathBuf,
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    PathBuf::from(format!("{}.{ext}", prefix.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn load_vocabs(dir: &Path) -> Result<(Vocabulary, Vocabulary)> {
    let load = |name: &str| {
        let path = dir.join(name);
        Vocabulary::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
    };
    Ok((load("src.vocab")?, load("tgt.vocab")?))
}

/// Documents of a single-side file, one sentence per line.
fn load_documents(path: &Path) -> Result<Vec<Vec<Sentence>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let corpus = parse_corpus(&text, &text, (path, path))?;
    Ok(corpus.documents.into_iter().map(|d| d.source).collect())
}

/// Reads `path` with the line layout of `layout`: same number of lines, blank
/// lines where `layout` separates documents. Any other line may be empty, so
/// empty translations survive the round trip.
fn load_aligned(path: &Path, layout: &[Vec<Sentence>]) -> Result<Vec<Vec<Sentence>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let mut docs = Vec::with_capacity(layout.len());
    for (d, doc) in layout.iter().enumerate() {
        if d > 0 {
            match lines.next() {
                Some((_, l)) if l.trim().is_empty() => {}
                Some((i, _)) => bail!("{}:{}: expected a blank line between documents", path.display(), i + 1),
                None => bail!("{}: ends after {d} of {} documents", path.display(), layout.len()),
            }
        }
        let mut sentences = Vec::with_capacity(doc.len());
        for _ in doc {
            let Some((_, l)) = lines.next() else {
                bail!("{}: ends inside document {}", path.display(), d + 1);
            };
            sentences.push(l.split_whitespace().map(String::from).collect());
        }
        docs.push(sentences);
    }
    if let Some((i, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        bail!("{}:{}: more lines than the reference", path.display(), i + 1);
    }
    Ok(docs)
}

pub fn gen_synth(s: &Settings, argv: &[String], out: &Path) -> Result<()> {
    create_dir(out)?;
    let splits = make_splits(&s.experiment);
    let mut run = RunManifest::new("gen-synth", argv, s);
    for (name, corpus) in [("train", &splits.train), ("valid", &splits.valid), ("test", &splits.test)] {
        let (src, tgt) = (out.join(format!("{name}.src")), out.join(format!("{name}.tgt")));
        write_corpus(corpus, &src, &tgt)?;
        let docs = out.join(format!("{name}.docs.tsv"));
        fs::write(&docs, manifest(corpus))?;
        for p in [&src, &tgt, &docs] {
            run.output(p)?;
        }
    }
    let lexicon = out.join("lexicon.tsv");
    splits.lexicon.save(&lexicon)?;
    run.output(&lexicon)?;
    run.metrics = json!({
        "train_docs": splits.train.documents.len(),
        "valid_docs": splits.valid.documents.len(),
        "test_docs": splits.test.documents.len(),
    });
    run.write(out)?;
    println!("wrote {} ({} concepts)", out.display(), splits.lexicon.concepts.len());
    Ok(())
}

pub fn build_vocab(s: &Settings, argv: &[String], corpus: &Path, out: &Path) -> Result<()> {
    let (src, tgt) = (with_ext(corpus, "src"), with_ext(corpus, "tgt"));
    let docs = load_corpus(&src, &tgt)?;
    create_dir(out)?;
    let mut run = RunManifest::new("build-vocab", argv, s);
    run.input(&src)?;
    run.input(&tgt)?;
    let mut sizes = Vec::new();
    for (side, name) in [(Side::Source, "src.vocab"), (Side::Target, "tgt.vocab")] {
        let vocab = corpus_vocab(&docs, side, s.vocab_size, s.min_freq)?;
        let path = out.join(name);
        vocab.save(&path)?;
        run.output(&path)?;
        sizes.push(vocab.len());
    }
    run.metrics = json!({ "src_size": sizes[0], "tgt_size": sizes[1] });
    run.write(out)?;
    println!("source vocabulary {} entries, target {}", sizes[0], sizes[1]);
    Ok(())
}

fn stage_config(s: &Settings, stage: Stage) -> TrainConfig {
    let e = &s.experiment;
    let template = if stage == Stage::Base { &e.base } else { &e.finetune };
    TrainConfig {
        stage,
        seed: sub_seed(e.seed, &format!("train-{stage}")),
        n_context: e.n_context,
        ..template.clone()
    }
}

/// Base training when `from` is `None`, fine-tuning otherwise.
pub fn train(s: &Settings, argv: &[String], paths: &DataPaths, stage: Stage, from: Option<&Path>) -> Result<()> {
    let (train_src, train_tgt) = (with_ext(&paths.train, "src"), with_ext(&paths.train, "tgt"));
    let (valid_src, valid_tgt) = (with_ext(&paths.valid, "src"), with_ext(&paths.valid, "tgt"));
    let train = load_corpus(&train_src, &train_tgt)?;
    let valid = load_corpus(&valid_src, &valid_tgt)?;
    let (src_vocab, tgt_vocab) = load_vocabs(&paths.vocab)?;
    let mut run = RunManifest::new(if from.is_some() { "finetune" } else { "train" }, argv, s);
    for p in [&train_src, &train_tgt, &valid_src, &valid_tgt] {
        run.input(p)?;
    }
    let model = match from {
        Some(path) => {
            run.checkpoint(path)?;
            let m = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            if (m.cfg.vocab_src, m.cfg.vocab_tgt) != (src_vocab.len(), tgt_vocab.len()) {
                bail!(
                    "checkpoint vocabularies ({}, {}) do not match {} ({}, {})",
                    m.cfg.vocab_src,
                    m.cfg.vocab_tgt,
                    paths.vocab.display(),
                    src_vocab.len(),
                    tgt_vocab.len()
                );
            }
            m
        }
        None => {
            let cfg = ModelConfig {
                vocab_src: src_vocab.len(),
                vocab_tgt: tgt_vocab.len(),
                ..s.experiment.model.clone()
            };
            Model::new(cfg, Variant::Sentence, sub_seed(s.seed(), "init"))?
        }
    };
    let data = TrainData {
        train: &train,
        valid: &valid,
        src_vocab: &src_vocab,
        tgt_vocab: &tgt_vocab,
    };
    let cfg = stage_config(s, stage);
    let outcome = train_stage(&model, &data, &cfg)?;
    create_dir(&paths.out)?;
    let ckpt = paths.out.join("model.ckpt");
    checkpoint::save(&outcome.model, &ckpt)?;
    let log = paths.out.join("train.log");
    fs::write(&log, outcome.log())?;
    run.output(&log)?;
    run.checkpoint(&ckpt)?;
    let best = outcome.best_epoch.and_then(|e| outcome.records.iter().find(|r| r.epoch == e));
    run.metrics = json!({
        "stage": stage.name(),
        "best_epoch": outcome.best_epoch,
        "best_val_loss": best.map(|r| r.val_loss),
        "aborted": outcome.aborted,
    });
    run.write(&paths.out)?;
    print!("{}", outcome.log());
    if let Some(msg) = outcome.aborted {
        return Err(lexcopy::Error::Numerical(format!("{msg}; last finite parameters saved to {}", ckpt.display())).into());
    }
    Ok(())
}

pub fn translate(
    s: &Settings,
    argv: &[String],
    model_path: &Path,
    vocab_dir: &Path,
    input: &Path,
    out: &Path,
    with_trace: bool,
) -> Result<()> {
    let model = checkpoint::load(model_path).with_context(|| format!("loading checkpoint {}", model_path.display()))?;
    let (src_vocab, tgt_vocab) = load_vocabs(vocab_dir)?;
    if (model.cfg.vocab_src, model.cfg.vocab_tgt) != (src_vocab.len(), tgt_vocab.len()) {
        bail!("vocabularies in {} do not match the checkpoint", vocab_dir.display());
    }
    let docs = load_documents(input)?;
    let search = SearchConfig {
        beam: s.experiment.beam,
        length_penalty: s.experiment.length_penalty,
        ..SearchConfig::default()
    };
    let mut outputs = Vec::with_capacity(docs.len());
    let mut trace = String::from(TRACE_HEADER);
    for (i, doc) in docs.iter().enumerate() {
        let sources: Vec<_> = doc.iter().map(|x| src_vocab.encode(x)).collect();
        let tr = translate_document(&model, &sources, s.experiment.n_context, &search, with_trace)?;
        if with_trace {
            trace.push_str(&trace_tsv(&lexcopy::corpus::doc_id(i), &tr, &tgt_vocab));
        }
        outputs.push(tr.iter().map(|t| tgt_vocab.decode(&t.tokens)).collect::<Vec<_>>());
    }
    create_dir(out)?;
    let mut run = RunManifest::new("translate", argv, s);
    run.input(input)?;
    run.checkpoint(model_path)?;
    let text = out.join("translation.txt");
    fs::write(&text, format_side(&outputs))?;
    run.output(&text)?;
    if with_trace {
        let path = out.join("trace.tsv");
        fs::write(&path, trace)?;
        run.output(&path)?;
    }
    run.metrics = json!({ "documents": outputs.len(), "variant": model.variant.name() });
    run.write(out)?;
    println!("translated {} documents into {}", outputs.len(), text.display());
    Ok(())
}

pub fn evaluate(
    s: &Settings,
    argv: &[String],
    hyp: &Path,
    reference: &Path,
    lexicon: Option<&Path>,
    smoothing: Smoothing,
    out: Option<&Path>,
) -> Result<()> {
    let ref_docs = load_documents(reference)?;
    let hyp_docs = load_aligned(hyp, &ref_docs)?;
    let bleu = bleu4(&hyp_docs, &ref_docs, smoothing)?;
    let lc = lc_score(&hyp_docs)?;
    let lc_ref = lc_score(&ref_docs)?;
    let consistency = match lexicon {
        Some(path) => Some(consistency_rate(&hyp_docs, &Lexicon::load(path)?)),
        None => None,
    };
    println!("bleu\t{:.2}", bleu.score);
    println!("lc_stem\t{:.2}", lc.corpus);
    println!("lc_stem_reference\t{:.2}", lc_ref.corpus);
    println!("lc_delta\t{:+.2}", lc.corpus - lc_ref.corpus);
    if let Some(c) = &consistency {
        println!("consistency\t{:.4}\t({} of {}, {} dropped)", c.rate, c.matched, c.compared, c.dropped);
    }
    println!("stopwords_sha256\t{}", stopwords_sha256());
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut run = RunManifest::new("evaluate", argv, s);
        run.input(hyp)?;
        run.input(reference)?;
        if let Some(p) = lexicon {
            run.input(p)?;
        }
        run.metrics = json!({
            "bleu": bleu,
            "lc": lc,
            "lc_reference": lc_ref.corpus,
            "lc_delta": lc.corpus - lc_ref.corpus,
            "consistency": consistency.map(|c| json!({"rate": c.rate, "matched": c.matched, "compared": c.compared, "dropped": c.dropped})),
        });
        let report = dir.join("report.json");
        fs::write(&report, serde_json::to_string_pretty(&run.metrics)? + "\n")?;
        run.output(&report)?;
        run.write(dir)?;
    }
    Ok(())
}

pub fn gradcheck(s: &Settings, argv: &[String], step: f64, tol: f64, out: Option<&Path>) -> Result<()> {
    let check = copy_step_grad_check(grad_check_config(), GroupSet::ALL, s.seed(), step, tol)?;
    let worst = check.worst_param.as_deref().unwrap_or("-");
    println!("gradcheck: {} parameters, {} (worst: {worst})", check.parameters, check.report);
    if let Some(dir) = out {
        create_dir(dir)?;
        let mut run = RunManifest::new("gradcheck", argv, s);
        run.metrics = json!({
            "max_rel_err": check.report.max_rel_err,
            "entries": check.report.entries_checked,
            "tol": tol,
            "passed": check.report.passed,
            "worst_param": check.worst_param,
        });
        run.write(dir)?;
    }
    if !check.report.passed {
        return Err(lexcopy::Error::Numerical(format!(
            "gradient check failed: max rel err {:.3e} > {tol:e} in {worst}",
            check.report.max_rel_err
        ))
        .into());
    }
    Ok(())
}

pub fn experiment(s: &Settings, argv: &[String], out: Option<&Path>) -> Result<()> {
    let result = run_experiment(&s.experiment)?;
    let table = result.table();
    print!("{table}");
    let Some(dir) = out else {
        return Ok(());
    };
    create_dir(dir)?;
    let mut run = RunManifest::new("experiment", argv, s);
    let mut write = |name: &str, text: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, text)?;
        run.output(&path)
    };
    write("table.tsv", table)?;
    write("training.log", result.training_log())?;
    write("lexicon.tsv", result.splits.lexicon.to_tsv())?;
    let side = |side: Side| result.splits.test.side(side).map(<[Sentence]>::to_vec).collect::<Vec<_>>();
    write("test.src", format_side(&side(Side::Source)))?;
    write("test.tgt", format_side(&side(Side::Target)))?;
    for (system, docs) in &result.outputs {
        write(&format!("{system}.txt"), format_side(docs))?;
    }
    for stage in &result.stages {
        let path = dir.join(format!("{}.ckpt", stage.name));
        checkpoint::save(&stage.outcome.model, &path)?;
        run.checkpoint(&path)?;
    }
    run.metrics = serde_json::to_value(&result.scores)?;
    run.write(dir)?;
    Ok(())
}
