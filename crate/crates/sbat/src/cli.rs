//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sbat_core::partition::build_scale_series;
use sbat_core::pipeline::{synth_diffusion, Split, SynthConfig};

use crate::bench::{run_bench, to_csv, BenchMode, BenchSpec};
use crate::config::{schema_doc, RunConfig};
use crate::dump::dump_attention;
use crate::error::{CliError, Result};
use crate::io::{self, read_graph, write_bytes, write_graph, write_scale_series, SeriesFormat};
use crate::run::{evaluate, format_table, load_for_eval, run_train, write_report};

#[derive(Debug, Parser)]
#[command(name = "sbat", version, about = "Spatial balance attention forecasting tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiscale partition of a graph into a scale series.
    Partition(PartitionArgs),
    /// Precompute the Laplacian positional encoding.
    Pe(PeArgs),
    /// Generate a synthetic diffusion dataset.
    Synth(SynthArgs),
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Attention FLOP and timing benchmark.
    Bench(BenchArgs),
    /// Write attention maps of one window.
    DumpAttention(DumpArgs),
    /// Print the default configuration or schema notes.
    Config(ConfigArgs),
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub coords: Option<PathBuf>,
    /// Subgraph count of the first level.
    #[arg(long)]
    pub parts: usize,
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
    #[arg(long, default_value_t = sbat_core::partition::DEFAULT_BALANCE)]
    pub balance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PeArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub coords: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 512)]
    pub block_limit: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (series.bin or series.csv, edges.csv, coords.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator settings; flags below override them.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SeriesFormat::Bin)]
    pub format: SeriesFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Metric JSON destination; defaults to `<out_dir>/metrics_<split>.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    pub m: usize,
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Modes to run; both when omitted.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub mode: Vec<BenchMode>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub window: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Print schema notes (defaults and per-dataset subgraph counts) instead of JSON.
    #[arg(long)]
    pub schema: bool,
}

fn cmd_partition(a: &PartitionArgs) -> Result<()> {
    let g = read_graph(&a.graph, a.coords.as_deref(), None)?;
    let series = build_scale_series(&g, a.parts, a.levels, a.balance, a.seed)?;
    write_scale_series(&a.out, &series)?;
    for (i, plan) in series.plans.iter().enumerate() {
        println!(
            "level {i}: p={} m={} edge_cut={} balance={:.4}{}",
            plan.p,
            plan.m,
            plan.edge_cut,
            plan.achieved_balance,
            if plan.over_balance { " (over balance)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_pe(a: &PeArgs) -> Result<()> {
    let g = read_graph(&a.graph, a.coords.as_deref(), None)?;
    let pe = sbat_core::graph::laplacian_pe(&g, a.k, a.block_limit)?;
    for w in &pe.warnings {
        eprintln!("warning: {w}");
    }
    let header = io::PeHeader { n: g.n(), k: a.k, block_limit: a.block_limit, graph_hash: io::graph_hash(&g) };
    io::write_pe(&a.out, &pe.vectors, &header)?;
    println!("wrote {}x{} encoding from {} eigensolve block(s)", g.n(), a.k, pe.blocks.len());
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(path) => io::read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(steps) = a.steps {
        cfg.steps = steps;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let ds = synth_diffusion(&cfg)?;
    match a.format {
        SeriesFormat::Bin => io::write_series_bin(&a.out.join("series.bin"), &ds.series, ds.freq_minutes, &ds.name)?,
        SeriesFormat::Csv => io::write_series_csv(&a.out.join("series.csv"), &ds.series)?,
    }
    write_graph(&ds.graph, &a.out.join("edges.csv"), Some(&a.out.join("coords.csv")))?;
    io::write_json(&a.out.join("synth.json"), &cfg)?;
    println!("wrote {} nodes x {} steps to {}", ds.n(), ds.steps(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(e) = a.max_epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(dir) = &a.out_dir {
        cfg.paths.out_dir = dir.clone();
    }
    let summary = run_train(&cfg)?;
    for r in &summary.history {
        println!(
            "epoch {:>3}  train_loss {:.6}  val_mae {:.6}{}",
            r.epoch,
            r.train_loss,
            r.val_mae,
            if r.improved { "  *" } else { "" }
        );
    }
    if let Some(reason) = summary.diverged {
        return Err(CliError::contract(format!(
            "training diverged ({reason}); last good checkpoint kept in {}",
            summary.out_dir.display()
        )));
    }
    println!("best val_mae {:.6}; artifacts in {}", summary.best_val_mae, summary.out_dir.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let (prep, params) = load_for_eval(&cfg, &a.checkpoint)?;
    let split: Split = a.split.into();
    let report = evaluate(&prep, &params, split, cfg.data.null_threshold)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.out_dir.join(format!("metrics_{}.json", split_name(split))));
    write_report(&out, &report)?;
    print!("{}", format_table(&report));
    Ok(())
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let spec = BenchSpec {
        n_list: a.n_list.clone(),
        m: a.m,
        d: a.d,
        heads: a.heads,
        modes: if a.mode.is_empty() { vec![BenchMode::Sba, BenchMode::Dense] } else { a.mode.clone() },
        seed: a.seed,
        ..BenchSpec::default()
    };
    let rows = run_bench(&spec)?;
    for r in &rows {
        if r.relative_gap() > 0.01 {
            return Err(CliError::contract(format!(
                "closed form and counter disagree by {:.3}% at n={}",
                100.0 * r.relative_gap(),
                r.n
            )));
        }
    }
    let csv = to_csv(&rows);
    match &a.out {
        Some(path) => write_bytes(path, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_dump(a: &DumpArgs) -> Result<()> {
    let cfg = RunConfig::load(&a.config)?;
    let (prep, params) = load_for_eval(&cfg, &a.checkpoint)?;
    let paths = dump_attention(&prep, &params, a.split.into(), a.window, &a.out_dir)?;
    println!("wrote {} attention maps to {}", paths.len(), a.out_dir.display());
    Ok(())
}

fn cmd_config(a: &ConfigArgs) -> Result<()> {
    if a.schema {
        print!("{}", schema_doc());
    } else {
        print!("{}", RunConfig::default().to_json());
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Partition(a) => cmd_partition(a),
        Command::Pe(a) => cmd_pe(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::DumpAttention(a) => cmd_dump(a),
        Command::Config(a) => cmd_config(a),
    }
}
