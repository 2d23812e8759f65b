//! `lexcopy`: data generation, training, translation and evaluation for
//! copy-augmented document translation models.

mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lexcopy::train::Stage;

use crate::settings::{Profile, Settings, Usage};

#[derive(Debug, Parser)]
#[command(name = "lexcopy", version, about = "Lexically cohesive document translation with a copy mechanism")]
struct Cli {
    /// Log progress to standard error; repeat for more detail.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand. Precedence: flags, then the config
/// file, then the profile.
#[derive(Debug, Args)]
struct Common {
    #[arg(long, value_enum, default_value_t = Profile::Toy)]
    profile: Profile,
    /// Line-oriented `key = value` file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> Result<Settings, Usage> {
        let mut s = Settings::new(self.profile);
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        for pair in &self.overrides {
            s.apply_override(pair)?;
        }
        if let Some(seed) = self.seed {
            s.set("seed", &seed.to_string())?;
        }
        for (key, value) in extra {
            if let Some(v) = value {
                s.set(key, v)?;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SmoothingArg {
    None,
    AddOne,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic train, valid and test corpora with their lexicon.
    GenSynth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Leave the first-sentence source cue out.
        #[arg(long)]
        no_cue: bool,
    },
    /// Build source and target vocabularies from PREFIX.src and PREFIX.tgt.
    BuildVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PREFIX")]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_size: Option<usize>,
        #[arg(long)]
        min_freq: Option<usize>,
    },
    /// Train the sentence-level base model.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune a context stage on top of a checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// han-encoder, han-decoder, han-joint or copy.
        #[arg(long)]
        stage: Stage,
        #[arg(long, value_name = "CHECKPOINT")]
        from: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Translate a document-formatted source file.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CHECKPOINT")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        vocab: PathBuf,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-step copy trace.
        #[arg(long)]
        trace: bool,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        length_penalty: Option<f64>,
        #[arg(long)]
        n_context: Option<usize>,
    },
    /// Score a translation against a reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "FILE")]
        hyp: PathBuf,
        #[arg(long = "ref", value_name = "FILE")]
        reference: PathBuf,
        /// Synonym lexicon for the consistency rate.
        #[arg(long, value_name = "FILE")]
        lexicon: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SmoothingArg::None)]
        smoothing: SmoothingArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of a full copy-model decoder step.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the synthetic cohesion experiment end to end.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Training corpus prefix: PREFIX.src and PREFIX.tgt.
    #[arg(long, value_name = "PREFIX")]
    train: PathBuf,
    #[arg(long, value_name = "PREFIX")]
    valid: PathBuf,
    /// Directory holding src.vocab and tgt.vocab.
    #[arg(long, value_name = "DIR")]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli, argv: &[String]) -> anyhow::Result<()> {
    use commands::*;
    match cli.command {
        Command::GenSynth { common, out, no_cue } => {
            let s = common.resolve(&[("cue", no_cue.then(|| "false".to_string()))])?;
            gen_synth(&s, argv, &out)
        }
        Command::BuildVocab {
            common,
            corpus,
            out,
            max_size,
            min_freq,
        } => {
            let s = common.resolve(&[("vocab_size", some(&max_size)), ("min_freq", some(&min_freq))])?;
            build_vocab(&s, argv, &corpus, &out)
        }
        Command::Train { common, data, epochs } => {
            let s = common.resolve(&[("base.epochs", some(&epochs))])?;
            train(&s, argv, &data.paths(), Stage::Base, None)
        }
        Command::Finetune {
            common,
            data,
            stage,
            from,
            epochs,
        } => {
            if stage == Stage::Base {
                return Err(Usage("use `train` for the base stage".into()).into());
            }
            let s = common.resolve(&[("finetune.epochs", some(&epochs))])?;
            train(&s, argv, &data.paths(), stage, Some(&from))
        }
        Command::Translate {
            common,
            model,
            vocab,
            input,
            out,
            trace,
            beam,
            length_penalty,
            n_context,
        } => {
            let s = common.resolve(&[
                ("beam", some(&beam)),
                ("length_penalty", some(&length_penalty)),
                ("n_context", some(&n_context)),
            ])?;
            translate(&s, argv, &model, &vocab, &input, &out, trace)
        }
        Command::Evaluate {
            common,
            hyp,
            reference,
            lexicon,
            smoothing,
            out,
        } => {
            let smoothing = match smoothing {
                SmoothingArg::None => lexcopy::metrics::Smoothing::None,
                SmoothingArg::AddOne => lexcopy::metrics::Smoothing::AddOne,
            };
            evaluate(&common.resolve(&[])?, argv, &hyp, &reference, lexicon.as_deref(), smoothing, out.as_deref())
        }
        Command::Gradcheck { common, step, tol, out } => gradcheck(&common.resolve(&[])?, argv, step, tol, out.as_deref()),
        Command::Experiment { common, out } => experiment(&common.resolve(&[])?, argv, out.as_deref()),
    }
}

impl DataArgs {
    fn paths(&self) -> commands::DataPaths {
        commands::DataPaths {
            train: self.train.clone(),
            valid: self.valid.clone(),
            vocab: self.vocab.clone(),
            out: self.out.clone(),
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<lexcopy::Error>() {
        Some(lexcopy::Error::Config(_)) => 1,
        Some(lexcopy::Error::Numerical(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
