//! Argument parsing and dispatch.

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{anyhow, Result};
use clap::{Args, Parser, Subcommand};

use labharm::retriever::RetrievalMode;

use crate::commands;
use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "labharm", version, about = "Harmonize local lab test triads against a reference database")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized stage (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for the configured artifact paths.
#[derive(Debug, Clone, Default, Args)]
pub struct Inputs {
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub synonyms: Option<PathBuf>,
    #[arg(long)]
    pub index_dir: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean a raw query CSV into JSON lines plus a rejects report.
    Preprocess {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rejects: PathBuf,
    },
    /// Build and save the lexical and vector indexes.
    Index {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tune retrieval weights for MRR on labeled queries.
    Tune {
        #[command(flatten)]
        inputs: Inputs,
        /// JSON lines `{id, triad, gold}`, or a query file used with --gold.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gold: Option<PathBuf>,
        #[arg(long)]
        mode: Option<RetrievalMode>,
        #[arg(long)]
        budget: Option<usize>,
        /// Bound override, e.g. `alpha=0:5` (repeatable).
        #[arg(long = "bound")]
        bounds: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate labeled training pairs from the reference records.
    GeneratePairs {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        total: Option<usize>,
        /// Retrieval depth for hard negatives (0 disables).
        #[arg(long)]
        neighbors: Option<usize>,
    },
    /// Train the reference compatibility scorer on a pair file.
    Train {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrieve, rerank and tag every query.
    Harmonize {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score ranked runs against gold labels.
    Evaluate {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, default_value = "1,3,5,10")]
        k: String,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Serve the review API over a results file.
    Serve {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        feedback: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
    /// Turn the review feedback log into a training pair file.
    ExportFeedback {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic benchmark (reference, queries, gold) to a directory.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        records: Option<usize>,
    },
    /// Run the retrieval ablation on the synthetic benchmark.
    Ablation {
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn apply_inputs(cfg: &mut PipelineConfig, inputs: &Inputs) {
    let p = &mut cfg.paths;
    let pairs = [
        (&mut p.reference, &inputs.reference),
        (&mut p.synonyms, &inputs.synonyms),
        (&mut p.index_dir, &inputs.index_dir),
        (&mut p.weights, &inputs.weights),
        (&mut p.model, &inputs.model),
    ];
    for (slot, value) in pairs {
        if value.is_some() {
            slot.clone_from(value);
        }
    }
}

pub fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.apply_seed(s);
    }
    Ok(cfg)
}

/// Runs one verb; human-readable output goes to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Preprocess { input, out, rejects } => {
            let s = commands::preprocess(&input, &out, &rejects)?;
            println!("{} queries written to {}, {} rejects to {}", s.queries, out.display(), s.rejects, rejects.display());
        }
        Command::Index { inputs, out } => {
            apply_inputs(&mut cfg, &inputs);
            cfg.validate()?;
            let n = commands::index(&cfg, &out)?;
            println!("indexed {n} records into {}", out.display());
        }
        Command::Tune {
            inputs,
            queries,
            gold,
            mode,
            budget,
            bounds,
            out,
            trace,
        } => {
            apply_inputs(&mut cfg, &inputs);
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(b) = budget {
                cfg.tuner.budget = b;
            }
            cfg.validate()?;
            let overrides = bounds.iter().map(|b| commands::parse_bound(b)).collect::<Result<Vec<_>>>()?;
            let t = commands::tune(&cfg, &queries, gold.as_deref(), &overrides, &out, trace.as_deref())?;
            println!(
                "{} weights {:?} validation MRR {:.4} on {} queries -> {}",
                t.mode.as_str(),
                t.weights.to_array(),
                t.validation_mrr,
                t.queries,
                out.display()
            );
        }
        Command::GeneratePairs {
            inputs,
            out,
            total,
            neighbors,
        } => {
            apply_inputs(&mut cfg, &inputs);
            if let Some(t) = total {
                cfg.pairs.schedule.total = t;
            }
            if let Some(k) = neighbors {
                cfg.pairs.neighbors = k;
            }
            cfg.validate()?;
            let n = commands::generate_pairs(&cfg, &out)?;
            println!("{n} pairs written to {}", out.display());
        }
        Command::Train {
            inputs,
            pairs,
            out,
            report,
            epochs,
        } => {
            apply_inputs(&mut cfg, &inputs);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            cfg.validate()?;
            let r = commands::train(&cfg, &pairs, &out, report.as_deref())?;
            println!(
                "trained on {} pairs ({} steps); validation F1 {:.4}, accuracy {:.4} -> {}",
                r.train_pairs,
                r.total_steps,
                r.validation.f1,
                r.validation.accuracy,
                out.display()
            );
        }
        Command::Harmonize { inputs, queries, out } => {
            apply_inputs(&mut cfg, &inputs);
            cfg.validate()?;
            let s = commands::harmonize(&cfg, &queries, &out)?;
            println!(
                "{} results written to {} ({} failures; run details in {})",
                s.results,
                out.display(),
                s.failures,
                s.metadata.display()
            );
        }
        Command::Evaluate { runs, gold, k, json } => {
            let ks = commands::parse_ks(&k)?;
            let report = commands::evaluate(&runs, &gold, &ks)?;
            if let Some(p) = json {
                std::fs::write(&p, serde_json::to_string_pretty(&report)?)?;
            }
            let name = runs.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
            print!("{}", commands::evaluation_table(&name, &report));
        }
        Command::Serve {
            results,
            feedback,
            host,
            port,
        } => {
            let results = results
                .or_else(|| cfg.paths.results.clone())
                .ok_or_else(|| anyhow!("--results or paths.results is required"))?;
            let feedback = feedback
                .or_else(|| cfg.paths.feedback.clone())
                .unwrap_or_else(|| commands::default_feedback_path(&results));
            let store = Arc::new(commands::open_review_store(&results, &feedback)?);
            let addr = format!(
                "{}:{}",
                host.unwrap_or_else(|| cfg.service.host.clone()),
                port.unwrap_or(cfg.service.port)
            );
            println!("serving {} (feedback log {}) on http://{addr}", results.display(), feedback.display());
            tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()?
                .block_on(crate::server::serve(store, &addr))?;
        }
        Command::ExportFeedback { log, out } => {
            let n = commands::export_feedback(&log, &out)?;
            println!("{n} pairs written to {}", out.display());
        }
        Command::Synth { out_dir, records } => {
            if let Some(n) = records {
                cfg.benchmark.synth.records = n;
            }
            for p in commands::synth(&cfg, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Ablation { json } => {
            print!("{}", commands::ablation(&cfg, json.as_deref())?);
        }
    }
    Ok(())
}
