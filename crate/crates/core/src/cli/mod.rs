//! Command-line experiment runner.

pub mod config;
pub mod report;
pub mod runner;
pub mod train;

use std::fs;
use std::path::{Path, PathBuf};

use clap::Parser;

use crate::error::Error;
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::selection::Aggregation;
use config::RunConfig;
use report::{plot_csv, RunReport};
use runner::{dry_run, dump_layout, run_experiment, sweep, RunOutput, SweepAxes};

#[derive(Debug, Default, Parser)]
#[command(name = "parctx", about = "Parallel context encoding experiments on a toy transformer")]
pub struct Args {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "kv|needle|icl|lm")]
    pub task: Option<String>,
    #[arg(long, value_name = "full|parallel")]
    pub scheme: Option<String>,
    #[arg(long, value_name = "P")]
    pub parallel_degree: Option<String>,
    #[arg(long, value_name = "on|off")]
    pub sink: Option<String>,
    #[arg(long, value_name = "STR")]
    pub sink_text: Option<String>,
    #[arg(long, value_name = "K")]
    pub select_k: Option<String>,
    #[arg(long, value_name = "none|t|ht|lht")]
    pub aggr: Option<String>,
    #[arg(long, value_name = "even|serialized")]
    pub position: Option<String>,
    #[arg(long, value_name = "N")]
    pub seq_len: Option<String>,
    #[arg(long, value_name = "M")]
    pub n_instances: Option<String>,
    #[arg(long, value_name = "S")]
    pub seed: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<String>,
    /// Train a fresh recall model instead of loading a checkpoint.
    #[arg(long)]
    pub train: bool,
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    #[arg(long)]
    pub dump_layout: bool,
    #[arg(long)]
    pub trace_selection: bool,
    #[arg(long)]
    pub dry_run: bool,
    /// Keys from full attention, values from the parallel encoding.
    #[arg(long)]
    pub oracle_keys: bool,
    /// Any other config key, e.g. `--set n_items=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Sweep parallel degrees (comma separated).
    #[arg(long, value_delimiter = ',', value_name = "P,...")]
    pub sweep_p: Vec<usize>,
    /// Sweep scheme variants: full, naive, sink, sel, sink+sel, value-only.
    #[arg(long, value_delimiter = ',', value_name = "LABEL,...")]
    pub sweep_schemes: Vec<String>,
    #[arg(long, value_delimiter = ',', value_name = "K,...")]
    pub sweep_k: Vec<usize>,
    #[arg(long, value_delimiter = ',', value_name = "AGGR,...")]
    pub sweep_aggr: Vec<String>,
}

impl Args {
    /// Defaults, then the config file, then flags.
    pub fn to_config(&self) -> crate::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_text(
                &fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?,
            )?,
            None => RunConfig::default(),
        };
        let flags = [
            ("task", &self.task),
            ("scheme", &self.scheme),
            ("parallel_degree", &self.parallel_degree),
            ("sink", &self.sink),
            ("sink_text", &self.sink_text),
            ("select_k", &self.select_k),
            ("aggr", &self.aggr),
            ("position", &self.position),
            ("seq_len", &self.seq_len),
            ("n_instances", &self.n_instances),
            ("seed", &self.seed),
            ("checkpoint", &self.checkpoint),
            ("out", &self.out),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for (k, on) in [
            ("train", self.train),
            ("dump_layout", self.dump_layout),
            ("trace_selection", self.trace_selection),
            ("dry_run", self.dry_run),
            ("oracle_keys", self.oracle_keys),
        ] {
            if on {
                cfg.set(k, "on")?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    fn sweep_axes(&self, cfg: &RunConfig) -> crate::Result<Option<SweepAxes>> {
        if self.sweep_p.is_empty() && self.sweep_schemes.is_empty() && self.sweep_k.is_empty() && self.sweep_aggr.is_empty()
        {
            return Ok(None);
        }
        Ok(Some(SweepAxes {
            degrees: if self.sweep_p.is_empty() { vec![cfg.parallel_degree] } else { self.sweep_p.clone() },
            schemes: if self.sweep_schemes.is_empty() { vec![cfg.scheme_label()] } else { self.sweep_schemes.clone() },
            select_k: self.sweep_k.clone(),
            aggregations: self.sweep_aggr.iter().map(|a| Aggregation::parse(a)).collect::<crate::Result<_>>()?,
        }))
    }
}

/// Failure classes, mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(Error),
    #[error("checkpoint: {0}")]
    Checkpoint(Error),
    #[error("{0}")]
    Divergence(Error),
    #[error("{0}")]
    Run(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Checkpoint(_) => 3,
            Self::Divergence(_) => 4,
            Self::Run(_) => 1,
        }
    }

    fn run(e: Error) -> Self {
        match e {
            Error::Config(_) => Self::Config(e),
            Error::Divergence { .. } => Self::Divergence(e),
            e => Self::Run(e),
        }
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Run(e.into()))
}

fn jsonl<T: serde::Serialize>(items: &[T]) -> Result<String, CliError> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it).map_err(|e| CliError::Run(e.into()))?);
        s.push('\n');
    }
    Ok(s)
}

/// Trains or loads the model named by the config.
pub fn obtain_model(cfg: &RunConfig) -> Result<Model, CliError> {
    if cfg.train {
        let (model, outcome) = train::train_recall_model(cfg).map_err(CliError::run)?;
        write(&cfg.out.join("loss.csv"), &outcome.to_csv())?;
        let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.pctx"));
        save_checkpoint(&model, &path).map_err(CliError::Checkpoint)?;
        eprintln!("trained {} steps, final loss {:.4}, saved {}", cfg.train_steps, outcome.final_loss, path.display());
        return Ok(model);
    }
    let path = cfg.checkpoint.as_ref().ok_or_else(|| CliError::Config(Error::Config("no checkpoint given".into())))?;
    let model = load_checkpoint(path).map_err(CliError::Checkpoint)?;
    let mc = model.config();
    if (mc.model_dim, mc.layers, mc.heads) != (cfg.model_dim, cfg.layers, cfg.heads) {
        eprintln!("note: checkpoint shape overrides the configured model size");
    }
    Ok(model)
}

/// Runs the command line; returns the reports written.
pub fn run(args: &Args) -> Result<Vec<RunReport>, CliError> {
    let cfg = args.to_config().map_err(CliError::Config)?;
    cfg.validate().map_err(CliError::Config)?;
    let axes = args.sweep_axes(&cfg).map_err(CliError::Config)?;
    if let Some(a) = &axes {
        a.expand(&cfg).map_err(CliError::Config)?;
    }
    fs::create_dir_all(&cfg.out).map_err(|e| CliError::Run(e.into()))?;
    if cfg.dump_layout {
        let layout = dump_layout(&cfg, 0).map_err(CliError::run)?;
        write(&cfg.out.join("layout.json"), &serde_json::to_string_pretty(&layout).map_err(|e| CliError::Run(e.into()))?)?;
    }
    if cfg.dry_run {
        let report = dry_run(&cfg).map_err(CliError::run)?;
        let line = jsonl(&[report])?;
        write(&cfg.out.join("dry_run.jsonl"), &line)?;
        print!("{line}");
        return Ok(Vec::new());
    }
    let model = obtain_model(&cfg)?;
    let outputs: Vec<RunOutput> = match &axes {
        Some(a) => {
            let (runs, summary) = sweep(&model, &cfg, a).map_err(CliError::run)?;
            write(&cfg.out.join("sweep_summary.json"), &serde_json::to_string_pretty(&summary).map_err(|e| CliError::Run(e.into()))?)?;
            let mut reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
            reports.sort_by(|a, b| {
                (a.scheme_label.as_str(), a.config.parallel_degree).cmp(&(b.scheme_label.as_str(), b.config.parallel_degree))
            });
            write(&cfg.out.join("metric_vs_p.csv"), &plot_csv(&reports))?;
            write(&cfg.out.join("entropy_vs_p.csv"), &plot_csv(&reports))?;
            match summary.pearson_r {
                Some(r) => println!("pearson_r(entropy_mean, metric) = {r:.4}"),
                None => println!("pearson_r(entropy_mean, metric) = null"),
            }
            runs
        }
        None => vec![run_experiment(&model, &cfg).map_err(CliError::run)?],
    };
    let reports: Vec<RunReport> = outputs.iter().map(|o| o.report.clone()).collect();
    write(&cfg.out.join("report.jsonl"), &jsonl(&reports)?)?;
    write(&cfg.out.join("plot.csv"), &plot_csv(&reports))?;
    if cfg.trace_selection {
        let traces: Vec<_> = outputs.iter().flat_map(|o| o.traces.iter().cloned()).collect();
        write(&cfg.out.join("selection_trace.jsonl"), &jsonl(&traces)?)?;
    }
    for r in &reports {
        println!(
            "{:<10} P={:<3} {}={:.4} entropy={:.4} ({:.0} ms)",
            r.scheme_label,
            r.config.parallel_degree,
            r.metric.as_str(),
            r.aggregate,
            r.entropy_mean,
            r.wall_clock_ms
        );
    }
    Ok(reports)
}
