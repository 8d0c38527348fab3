//! `entangler`: train, pretrain, evaluate and tag with the entanglement model.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use entangler_core::pipeline::data::load_corpus;
use entangler_core::pipeline::{
    evaluate, predict_text, pretrain, train_seeds, RunConfig, Task, TaskData, TaskModel, BEST_DIR,
};
use entangler_core::tokenize::build_vocabs;
use entangler_core::Error;

#[derive(Parser, Debug)]
#[command(name = "entangler", version, about = "Character/subword entanglement model")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. `--set lr=1e-3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fine-tune on `train_file`, select on `dev_file`, score `test_file`.
    Train {
        /// Number of runs with consecutive seeds; reports mean and std.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Joint MLM and character-word matching pretraining on a plain corpus.
    Pretrain,
    /// Score a trained checkpoint on a labeled file.
    Evaluate {
        /// Checkpoint directory [default: <checkpoint_dir>/best].
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Labeled data [default: test_file].
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Label stdin, one whitespace-tokenized sentence per line.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Learn subword and character vocabularies from a corpus.
    BuildVocab {
        /// Corpus [default: train_file].
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory for subword.vocab and char.vocab.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error kind=usage message={:?}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error kind={} message={message:?}", e.kind());
            match e {
                Error::Usage(_) | Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn run(cli: &Cli) -> entangler_core::Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let mut out = io::stdout().lock();
    let text = match &cli.command {
        Command::Train { seeds } => {
            let (reports, summary) = train_seeds(&cfg, *seeds)?;
            if *seeds == 1 {
                reports[0].to_toml()
            } else {
                toml::to_string(&summary).expect("summary serializes")
            }
        }
        Command::Pretrain => {
            let report = pretrain(&cfg)?;
            let last = report.steps.last().copied();
            match last {
                Some(l) => format!(
                    "steps = {}\ntotal = {}\nmatching = {}\nsubword_mlm = {}\nchar_mlm = {}\nuniform_matching = {}\n",
                    report.steps.len(),
                    l.total,
                    l.matching,
                    l.subword_mlm,
                    l.char_mlm,
                    report.uniform_matching
                ),
                None => "steps = 0\n".into(),
            }
        }
        Command::Evaluate { checkpoint, data } => {
            let model = TaskModel::load(&checkpoint_dir(&cfg, checkpoint.as_deref()))?;
            let path = data
                .clone()
                .or_else(|| cfg.test_file.clone())
                .or_else(|| model.config.test_file.clone())
                .ok_or_else(|| Error::Usage("no data: pass --data or set test_file".into()))?;
            let metrics = evaluate(&model, &TaskData::load(model.config.task, &path)?)?;
            toml::to_string(&metrics).expect("metrics serialize")
        }
        Command::Predict { checkpoint } => {
            let model = TaskModel::load(&checkpoint_dir(&cfg, checkpoint.as_deref()))?;
            let mut input = String::new();
            io::stdin()
                .read_to_string(&mut input)
                .map_err(|e| Error::io("<stdin>", e))?;
            predict_text(&model, &input)?
        }
        Command::BuildVocab { input, out: dir } => {
            let path = input
                .clone()
                .or_else(|| cfg.train_file.clone())
                .ok_or_else(|| Error::Usage("no corpus: pass --input or set train_file".into()))?;
            let corpus = match cfg.task {
                Task::Pretrain => load_corpus(&path)?,
                task => TaskData::load(task, &path)?.sentences(),
            };
            let (sub, chr) = build_vocabs(&corpus, cfg.num_merges)?;
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            sub.save(&dir.join("subword.vocab"))?;
            chr.save(&dir.join("char.vocab"))?;
            format!("subword_vocab = {}\nchar_vocab = {}\n", sub.len(), chr.len())
        }
    };
    out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
}

fn checkpoint_dir(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.checkpoint_dir.join(BEST_DIR))
}
