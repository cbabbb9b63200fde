use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmsenti::pipeline::{self, EmbedKind, PipelineConfig, Predictor};
use cmsenti::subword::VocabKind;
use cmsenti::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "cmsenti", version, about = "Sentiment classification for code-mixed social media text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a configuration value, e.g. `--set train.lr=0.001`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Learn the subword vocabulary
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        /// Training file (overrides paths.train)
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_parser = ["bpe", "unigram"])]
        kind: Option<String>,
        #[arg(long)]
        vocab_size: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit one of the embedding components
    TrainEmbed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["skipgram", "contextual", "tfidf"])]
        kind: String,
        /// Vocabulary file (default: vocab.json in the artifact directory)
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Training file (overrides paths.train)
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the classifier
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score the trained classifier and write metrics.json
    Eval {
        #[command(flatten)]
        common: Common,
        /// Labeled data (default: paths.test, else the dev split)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Classify texts, one JSON line per text
    Predict {
        /// Checkpoint file; components are read from its directory
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true)]
        text: Vec<String>,
    },
}

fn config(common: &Common, extra: Vec<String>) -> Result<PipelineConfig, Error> {
    let mut sets = common.sets.clone();
    sets.extend(extra);
    PipelineConfig::load(common.config.as_deref(), &sets)
}

fn path_override(key: &str, p: &Option<PathBuf>) -> Result<Option<String>, Error> {
    p.as_ref()
        .map(|p| Ok(format!("{key}={}", serde_json::to_string(p)?)))
        .transpose()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::TrainTokenizer {
            common,
            input,
            kind,
            vocab_size,
            out,
        } => {
            let mut extra: Vec<String> = path_override("paths.train", &input)?.into_iter().collect();
            if let Some(k) = kind {
                extra.push(format!("tokenizer.kind={k}"));
            }
            if let Some(n) = vocab_size {
                extra.push(format!("tokenizer.vocab_size={n}"));
            }
            let cfg = config(&common, extra)?;
            let vocab = pipeline::train_tokenizer(&cfg, out.as_deref())?;
            let kind = match vocab.kind() {
                VocabKind::Bpe => "bpe",
                VocabKind::Unigram => "unigram",
            };
            println!("{kind} vocabulary with {} pieces", vocab.len());
        }
        Command::TrainEmbed {
            common,
            kind,
            vocab,
            input,
            out,
        } => {
            let kind: EmbedKind = kind.parse()?;
            let cfg = config(&common, path_override("paths.train", &input)?.into_iter().collect())?;
            match pipeline::train_embedding(&cfg, kind, vocab.as_deref(), out.as_deref())? {
                pipeline::Embedding::Skipgram(t) => println!("skipgram table, dim {}", t.dim()),
                pipeline::Embedding::Contextual(c) => println!("contextual encoder, dim {}", c.dim()),
                pipeline::Embedding::TfIdf(m) => println!("tf-idf model, {} terms", m.dim()),
            }
        }
        Command::Train { common } => {
            let cfg = config(&common, Vec::new())?;
            let out = pipeline::train_model(&cfg)?;
            let ckpt = &out.checkpoint;
            for r in &ckpt.history {
                println!(
                    "epoch {:>3}  loss {:.4}  dev accuracy {:.4}  dev weighted F1 {:.4}",
                    r.epoch, r.train_loss, r.dev_accuracy, r.dev_weighted_f1
                );
            }
            println!("kept epoch {}\n", ckpt.best_epoch);
            print!("{}", out.best);
        }
        Command::Eval { common, data } => {
            let cfg = config(&common, Vec::new())?;
            let report = pipeline::evaluate_model(&cfg, data.as_deref())?;
            print!("{report}");
        }
        Command::Predict { checkpoint, text } => {
            let predictor = Predictor::load(&checkpoint)?;
            let texts: Vec<&str> = text.iter().map(String::as_str).collect();
            for (t, p) in texts.iter().zip(predictor.predict(&texts)?) {
                let line = serde_json::json!({
                    "text": t,
                    "label": p.label,
                    "probabilities": p.probabilities,
                });
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = match e.kind() {
                ErrorKind::Validation => ("validation", 1),
                ErrorKind::Dependency => ("dependency", 1),
                ErrorKind::Runtime => ("runtime", 3),
            };
            let msg = match &e {
                Error::Validation(m) => m.clone(),
                e => e.to_string(),
            };
            let msg = msg.replace('\n', " ");
            eprintln!("error[{tag}]: {msg}");
            ExitCode::from(code)
        }
    }
}
