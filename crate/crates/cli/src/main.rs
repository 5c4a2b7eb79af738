mod config;
mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use influence_core::corpus::{read_corpus, sample_instances, train, write_corpus, Vocab};
use influence_core::graph::{to_dot, GraphView, Granularity};
use influence_core::influence::DoIConfig;
use influence_core::numerics::Precision;
use influence_core::pipeline::{trace_instance, Method, TraceFile, TraceSettings};
use influence_core::transformer::ToyTransformer;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "influence", version, about = "Influence patterns in a toy masked-LM transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run configuration as JSON.
    Config,
    /// Train a model and write checkpoint, corpora and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
    },
    /// Extract one pattern per content word of every corpus instance.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "attention")]
        granularity: Granularity,
        #[arg(long, default_value = "gpr")]
        method: Method,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trace only the first N instances.
        #[arg(long)]
        limit: Option<usize>,
        /// Use 0.5 I + 0.5 W matrices in the attention baseline.
        #[arg(long)]
        rollout: bool,
        /// Interpolate one word at a time instead of all content words jointly.
        #[arg(long)]
        per_word: bool,
        #[arg(long, env = "INFLUENCE_PRECISION", default_value = "f64")]
        precision: Precision,
        #[arg(long)]
        out: PathBuf,
        /// Directory for one DOT file per instance.
        #[arg(long)]
        dot: Option<PathBuf>,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Compute metrics for one or more trace files.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        patterns: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus the traces were made from; checked against the records.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        markdown: Option<PathBuf>,
        /// CSV of per-position entropy against mean |attribution|.
        #[arg(long)]
        scatter: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

/// Exit code 2 for bad invocations and unreadable inputs, 1 for failures
/// while running.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn read_input(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(Failure::Usage)
}

fn write_output(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn parse_config(text: &str) -> anyhow::Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| anyhow::anyhow!("config error at {}: {}", e.path(), e.inner()))?;
    if cfg.schema_version != config::CONFIG_SCHEMA_VERSION {
        anyhow::bail!(
            "config schema_version {} unsupported (expected {})",
            cfg.schema_version,
            config::CONFIG_SCHEMA_VERSION
        );
    }
    Ok(cfg)
}

fn pool(jobs: usize) -> anyhow::Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

fn load_model(path: &Path) -> Result<ToyTransformer, Failure> {
    let text = read_input(path)?;
    ToyTransformer::from_json(&text)
        .with_context(|| format!("bad checkpoint {}", path.display()))
        .map_err(Failure::Usage)
}

/// Vocabulary of the template the model was trained on.
fn vocab_for(model: &ToyTransformer) -> anyhow::Result<Vocab> {
    let t = influence_core::corpus::Template::sva_obj();
    let v = t.vocab();
    anyhow::ensure!(
        v.len() == model.config.vocab,
        "checkpoint vocabulary ({}) does not match the sva_obj template ({})",
        model.config.vocab,
        v.len()
    );
    Ok(v)
}

fn cmd_train(config: &Path, out_dir: &Path) -> Result<(), Failure> {
    let cfg = parse_config(&read_input(config)?).map_err(Failure::Usage)?;
    let template = cfg.template().map_err(Failure::Usage)?;
    let train_set = sample_instances(&template, cfg.n_train, cfg.train_seed)?;
    let held = sample_instances(&template, cfg.n_held_out, cfg.held_out_seed)?;
    let mut model = ToyTransformer::new(cfg.model.config(&template))?;
    let report = train(&mut model, &train_set, Some(&held), &cfg.train)?;
    let ckpt = model.to_json()?;
    let ckpt_path = out_dir.join("checkpoint.json");
    write_output(&ckpt_path, &ckpt)?;
    write_output(&out_dir.join("train.tsv"), &write_corpus(&train_set))?;
    write_output(&out_dir.join("held_out.tsv"), &write_corpus(&held))?;
    let metrics = serde_json::json!({
        "schema_version": 1,
        "config": cfg,
        "checkpoint_sha256": hex::encode(Sha256::digest(ckpt.as_bytes())),
        "epochs": report.epochs,
        "held_out": report.held_out,
    });
    write_output(&out_dir.join("train_metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    println!("{}", ckpt_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_trace(
    checkpoint: &Path,
    corpus: &Path,
    settings: TraceSettings,
    limit: Option<usize>,
    out: &Path,
    dot: Option<&Path>,
    jobs: usize,
) -> Result<(), Failure> {
    settings.check().map_err(|e| Failure::Usage(e.into()))?;
    let model = load_model(checkpoint)?;
    let mut instances = read_corpus(&read_input(corpus)?)
        .with_context(|| format!("bad corpus {}", corpus.display()))
        .map_err(Failure::Usage)?;
    if let Some(n) = limit {
        instances.truncate(n);
    }
    let vocab = vocab_for(&model)?;
    let traced = pool(jobs)?.install(|| {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, inst)| trace_instance(&model, &vocab, inst, i, &settings))
            .collect::<influence_core::Result<Vec<_>>>()
    })?;
    let file = TraceFile::new(settings, &vocab, &traced)?;
    write_output(out, &file.to_json()?)?;
    if let Some(dir) = dot {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for (i, t) in traced.iter().enumerate() {
            let view = GraphView::build(&model.config, t.instance.ids.len(), t.instance.mask_pos, settings.granularity)?;
            let tokens: Vec<String> = t
                .instance
                .ids
                .iter()
                .map(|&id| vocab.token(id).map(str::to_string))
                .collect::<influence_core::Result<_>>()?;
            write_output(&dir.join(format!("instance_{i:04}.dot")), &to_dot(&view, &t.collection, Some(&tokens)))?;
        }
    }
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::default())?);
            Ok(())
        }
        Command::Train { config, out_dir } => cmd_train(&config, &out_dir),
        Command::Trace {
            checkpoint,
            corpus,
            granularity,
            method,
            samples,
            seed,
            limit,
            rollout,
            per_word,
            precision,
            out,
            dot,
            jobs,
        } => {
            if samples == 0 {
                return Err(Failure::Usage(anyhow::anyhow!("--samples must be at least 1")));
            }
            let settings = TraceSettings {
                method,
                granularity,
                doi: DoIConfig {
                    n_samples: samples,
                    include_endpoints: false,
                    precision,
                },
                seed,
                rollout,
                per_word,
            };
            cmd_trace(&checkpoint, &corpus, settings, limit, &out, dot.as_deref(), jobs)
        }
        Command::Report {
            patterns,
            checkpoint,
            corpus,
            out,
            markdown,
            scatter,
            seed,
            jobs,
        } => {
            let model = load_model(&checkpoint)?;
            let mut files = Vec::new();
            for p in &patterns {
                let f = TraceFile::from_json(&read_input(p)?)
                    .with_context(|| format!("bad trace file {}", p.display()))
                    .map_err(Failure::Usage)?;
                files.push(f);
            }
            if let Some(c) = corpus {
                let instances = read_corpus(&read_input(&c)?)
                    .with_context(|| format!("bad corpus {}", c.display()))
                    .map_err(Failure::Usage)?;
                for (f, p) in files.iter().zip(&patterns) {
                    for r in &f.instances {
                        if instances.get(r.index) != Some(&r.instance) {
                            return Err(Failure::Usage(anyhow::anyhow!(
                                "{}: instances[{}] does not match the corpus",
                                p.display(),
                                r.index
                            )));
                        }
                    }
                }
            }
            let rep = pool(jobs)?.install(|| report::build(&model, &files, seed))?;
            write_output(&out, &serde_json::to_string_pretty(&rep)?)?;
            if let Some(m) = markdown {
                write_output(&m, &report::markdown(&rep))?;
            }
            if let Some(s) = scatter {
                write_output(&s, &report::scatter_csv(&rep))?;
            }
            println!("{}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
