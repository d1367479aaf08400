//! `detm-lab`: prepare corpora, train and evaluate dynamic embedded topic
//! models, and run one-axis hyperparameter sweeps.

mod runner;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use detm_core::corpus::{build_vocabulary, load_corpus, make_all_subdocuments, save_corpus, split_corpus, DEFAULT_SPLIT};
use detm_core::embeddings::{save_embeddings, train_skipgram};
use detm_core::eval::seed_variance;
use detm_core::pipeline::{evaluate_checkpoint, prepare, resolve_embeddings, run_prepared};
use detm_core::report::emit_report;
use detm_core::sweep::{run_sweep, Job, ResultStore, RESULTS_FILE};
use detm_core::synthetic::{generate, word_token, SyntheticSpec};
use detm_core::{
    load_checkpoint, save_checkpoint, EmbeddingMatrix, EmbeddingSource, RunConfig, SgnsConfig, SweepPlan, Vocabulary,
};

use crate::runner::ProcessRunner;

const CHECKPOINT_FILE: &str = "checkpoint.json";
const CONFIG_FILE: &str = "config.json";
const REPORT_FILE: &str = "report.json";

#[derive(Parser)]
#[command(name = "detm-lab", version, about = "Dynamic embedded topic model experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic corpus from a known dynamic topic model.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Also write the generating word embeddings here.
        #[arg(long)]
        embeddings_out: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        documents: usize,
        #[arg(long, default_value_t = 100)]
        vocab_size: usize,
        #[arg(long, default_value_t = 3)]
        topics: usize,
        #[arg(long, default_value_t = 4)]
        windows: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the training-split vocabulary of a corpus.
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Run configuration supplying vocabulary size, sharding and split seed.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train skip-gram word embeddings on the training and validation splits.
    Embed {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 300)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 5)]
        window: usize,
        #[arg(long, default_value_t = 5)]
        negatives: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one model and evaluate it on the test split.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Word embedding file; trained with default settings when absent.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the checkpoint, config and report.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a saved checkpoint on a corpus's test split.
    Evaluate {
        /// Checkpoint file, or a directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the config saved next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (corpus, value, seed) of a sweep plan, skipping finished ones.
    Sweep {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run jobs on threads of this process instead of child processes.
        #[arg(long)]
        in_process: bool,
    },
    /// Render sweep results as NLL tables.
    Report {
        /// Results directory or results file.
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value_t = 0.03)]
        two_sigma: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two standard deviations of test NLL across seeds, per cell.
    Significance {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        json: bool,
    },
    #[command(hide = true)]
    RunJob {
        #[arg(long)]
        job: PathBuf,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Latex,
    Json,
}

fn read_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(
    out: &Path,
    embeddings_out: Option<&Path>,
    spec: SyntheticSpec,
) -> Result<()> {
    let s = generate(&spec)?;
    save_corpus(&s.corpus, out)?;
    if let Some(path) = embeddings_out {
        let vocab = Vocabulary::from_tokens((0..spec.vocab_size).map(word_token).collect())?;
        let matrix = EmbeddingMatrix { vectors: s.rho, vocab_hash: vocab.checksum() };
        save_embeddings(&matrix, &vocab, path)?;
    }
    eprintln!("wrote {} documents to {}", s.corpus.len(), out.display());
    Ok(())
}

fn vocab(corpus: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let corpus = load_corpus(corpus)?;
    let split = split_corpus(&corpus, DEFAULT_SPLIT, cfg.split_seed)?;
    let subdocs = make_all_subdocuments(&split.train, cfg.max_subdoc_tokens)?;
    let vocab = build_vocabulary(&subdocs, cfg.vocab_size, cfg.max_word_sub_occurrence)?;
    vocab.save(out)?;
    eprintln!("vocabulary of {} words written to {}", vocab.len(), out.display());
    Ok(())
}

fn embed(corpus: &Path, vocab: &Path, config: Option<&Path>, sgns: &SgnsConfig, out: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let vocab = Vocabulary::load(vocab)?;
    let corpus = load_corpus(corpus)?;
    let split = split_corpus(&corpus, DEFAULT_SPLIT, cfg.split_seed)?;
    let mut docs = split.train;
    docs.extend(split.validation);
    let subdocs = make_all_subdocuments(&docs, cfg.max_subdoc_tokens)?;
    let matrix = train_skipgram(&subdocs, &vocab, sgns)?;
    save_embeddings(&matrix, &vocab, out)?;
    eprintln!("{} x {} embeddings written to {}", matrix.len(), matrix.dimension(), out.display());
    Ok(())
}

fn train(corpus: &Path, embeddings: Option<&Path>, config: Option<&Path>, out: &Path, quiet: bool) -> Result<()> {
    let cfg = read_config(config)?;
    let corpus = load_corpus(corpus)?;
    let prepared = prepare(&corpus, &cfg)?;
    let source = match embeddings {
        Some(p) => EmbeddingSource::File(p.to_path_buf()),
        None => EmbeddingSource::Train(SgnsConfig { seed: cfg.seed, ..SgnsConfig::default() }),
    };
    let rho = resolve_embeddings(&source, &prepared)?;
    let outcome = run_prepared(&prepared, rho, &cfg, &mut |rec| {
        if !quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val nll {:.4}  ({:.1}s)",
                rec.epoch, rec.train.total, rec.validation_nll, rec.wall_seconds
            );
        }
    })?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    save_checkpoint(&outcome.checkpoint, out.join(CHECKPOINT_FILE))?;
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?)?;
    let report = serde_json::to_string_pretty(&outcome.report)?;
    fs::write(out.join(REPORT_FILE), &report)?;
    println!("{report}");
    Ok(())
}

fn evaluate(checkpoint: &Path, corpus: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (file, dir) = if checkpoint.is_dir() {
        (checkpoint.join(CHECKPOINT_FILE), checkpoint.to_path_buf())
    } else {
        (checkpoint.to_path_buf(), checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf())
    };
    let config = match config {
        Some(p) => Some(p.to_path_buf()),
        None => Some(dir.join(CONFIG_FILE)).filter(|p| p.exists()),
    };
    let cfg = read_config(config.as_deref())?;
    let ckpt = load_checkpoint(&file)?;
    let report = evaluate_checkpoint(&ckpt, &load_corpus(corpus)?, &cfg)?;
    write_output(out, &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn sweep(plan: &Path, out: &Path, in_process: bool) -> Result<ExitCode> {
    let plan = SweepPlan::load(plan)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut store = ResultStore::open(out)?;
    let checkpoints = out.join("checkpoints");
    let summary = if in_process {
        let runner = detm_core::sweep::InProcessRunner { checkpoint_dir: Some(checkpoints) };
        run_sweep(&plan, &runner, &mut store)?
    } else {
        let runner = ProcessRunner::new(out.join("jobs"), checkpoints)?;
        run_sweep(&plan, &runner, &mut store)?
    };
    let keys: Vec<String> = plan.jobs()?.into_iter().map(|j| j.key).collect();
    let failed: Vec<_> = store
        .records()
        .iter()
        .filter(|r| keys.contains(&r.key) && !r.succeeded())
        .collect();
    eprintln!(
        "{} completed, {} failed, {} already recorded; results in {}",
        summary.completed,
        summary.failed,
        summary.skipped,
        out.join(RESULTS_FILE).display()
    );
    for r in &failed {
        eprintln!("failed: {} {}={} seed {}: {}", r.corpus, r.axis, r.value, r.seed, r.error.as_deref().unwrap_or(""));
    }
    Ok(if failed.is_empty() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn report(results: &Path, two_sigma: f64, format: Format, out: Option<&Path>) -> Result<()> {
    let store = ResultStore::read(results)?;
    let doc = emit_report(store.records(), two_sigma)?;
    let text = match format {
        Format::Text => doc.to_text(),
        Format::Latex => doc.to_latex(),
        Format::Json => serde_json::to_string_pretty(&doc)? + "\n",
    };
    write_output(out, &text)
}

fn significance(results: &Path, json: bool) -> Result<()> {
    let store = ResultStore::read(results)?;
    let mut cells: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in store.records() {
        if let Some(rep) = &r.report {
            cells
                .entry((r.axis.to_string(), r.corpus.clone(), r.value.to_string()))
                .or_default()
                .push(rep.per_word_nll);
        }
    }
    let mut rows = Vec::new();
    for ((axis, corpus, value), scores) in cells {
        if scores.len() < 2 {
            continue;
        }
        let est = seed_variance(&scores)?;
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        rows.push(serde_json::json!({
            "axis": axis, "corpus": corpus, "value": value,
            "n_runs": est.n_runs, "mean_nll": mean, "two_sigma": est.two_sigma,
        }));
    }
    if rows.is_empty() {
        bail!("no cell has results from two or more seeds");
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        for r in &rows {
            println!(
                "{} {}={}  n={}  mean {:.4}  2σ {:.4}",
                r["corpus"].as_str().unwrap_or_default(),
                r["axis"].as_str().unwrap_or_default(),
                r["value"].as_str().unwrap_or_default(),
                r["n_runs"],
                r["mean_nll"].as_f64().unwrap_or(f64::NAN),
                r["two_sigma"].as_f64().unwrap_or(f64::NAN),
            );
        }
    }
    Ok(())
}

fn run_job(job: &Path, checkpoint_dir: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(job).with_context(|| format!("reading {}", job.display()))?;
    let job: Job = serde_json::from_str(&text)?;
    let output = detm_core::sweep::execute_job(&job, checkpoint_dir)?;
    println!("{}", serde_json::to_string(&output)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth { out, embeddings_out, documents, vocab_size, topics, windows, seed } => {
            let spec = SyntheticSpec {
                documents,
                vocab_size,
                topic_count: topics,
                window_count: windows,
                seed,
                ..SyntheticSpec::default()
            };
            synth(&out, embeddings_out.as_deref(), spec)?;
        }
        Command::Vocab { corpus, config, out } => vocab(&corpus, config.as_deref(), &out)?,
        Command::Embed { corpus, vocab, dim, out, config, epochs, window, negatives, seed } => {
            let sgns = SgnsConfig {
                dimension: dim,
                context_radius: window,
                negatives,
                epochs,
                seed,
                ..SgnsConfig::default()
            };
            embed(&corpus, &vocab, config.as_deref(), &sgns, &out)?;
        }
        Command::Train { corpus, embeddings, config, out, quiet } => {
            train(&corpus, embeddings.as_deref(), config.as_deref(), &out, quiet)?
        }
        Command::Evaluate { checkpoint, corpus, config, out } => {
            evaluate(&checkpoint, &corpus, config.as_deref(), out.as_deref())?
        }
        Command::Sweep { plan, out, in_process } => return sweep(&plan, &out, in_process),
        Command::Report { results, two_sigma, format, out } => report(&results, two_sigma, format, out.as_deref())?,
        Command::Significance { results, json } => significance(&results, json)?,
        Command::RunJob { job, checkpoint_dir } => run_job(&job, checkpoint_dir.as_deref())?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
