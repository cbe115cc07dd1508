use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use mtml_core::episodes::generate_combos;
use mtml_core::meta::InnerScope;
use mtml_core::tasks::{make_world, parse_task_list, sample_batch, WorldConfig};
use mtml_core::train::FinetuneMode;
use mtml_harness::config::{parse_seeds, HarnessConfig, Overrides};
use mtml_harness::grid::{build_grid, GridManifest, GRID_NAMES};
use mtml_harness::report;
use mtml_harness::runner::{self, RunOptions};

#[derive(Parser)]
#[command(name = "mtml", version, about = "Multi-task meta learning experiments on synthetic tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a grid of experiments and write per-run documents and aggregates.
    Run(RunArgs),
    /// Render mean±std and epoch tables from an output directory.
    Report {
        #[arg(long, default_value = "results")]
        out: PathBuf,
    },
    /// List the experiments of a grid.
    Grid(GridArgs),
    /// List the multi-task episode combos of a task set.
    Combos {
        #[arg(long, default_value = "T1,T2,T3,T4")]
        tasks: String,
    },
    /// Write a sampled batch of the synthetic world as CSV.
    ExportBatch {
        #[arg(long, default_value_t = 0)]
        world_seed: u64,
        #[arg(long, default_value = "T1,T2,T3,T4")]
        tasks: String,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration file; command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    grid: Option<String>,
    /// Comma-separated list (`0,1,2`) or range (`0..5`).
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    world_seed: Option<u64>,
    #[arg(long)]
    inner_lr: Option<f64>,
    #[arg(long)]
    outer_lr: Option<f64>,
    /// trunk_and_heads or heads_only
    #[arg(long)]
    inner_scope: Option<InnerScope>,
    /// heads_only, new_tasks or all_params
    #[arg(long)]
    finetune_mode: Option<FinetuneMode>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated experiment ids or families, e.g. `1` or `4.3,7`.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Re-run experiments that already have a matching result.
    #[arg(long)]
    force: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Print the grid as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

fn load_config(a: ConfigArgs, out: Option<PathBuf>, jobs: Option<usize>) -> Result<HarnessConfig> {
    let base = match &a.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    let o = Overrides {
        grid: a.grid,
        seeds: a.seeds,
        out: out.map(|p| p.to_string_lossy().into_owned()),
        world_seed: a.world_seed,
        inner_lr: a.inner_lr,
        outer_lr: a.outer_lr,
        inner_scope: a.inner_scope,
        finetune_mode: a.finetune_mode,
        jobs,
    };
    Ok(base.apply(o)?)
}

fn manifest(cfg: &HarnessConfig) -> Result<GridManifest> {
    let specs = build_grid(&cfg.grid, cfg).with_context(|| format!("known grids: {}", GRID_NAMES.join(", ")))?;
    Ok(GridManifest::new(&cfg.grid, specs, cfg, &cfg.out)?)
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(args.config, args.out, args.jobs)?;
    let m = manifest(&cfg)?;
    if m.filtered(args.filter.as_deref()).is_empty() {
        bail!("filter {:?} matches no experiment", args.filter.unwrap_or_default());
    }
    let opts = RunOptions {
        filter: args.filter,
        force: args.force,
        quiet: args.quiet,
    };
    let summary = runner::run(&m, &cfg, &opts)?;
    println!(
        "executed {} runs, skipped {} finished runs, {} aggregate rows in {}",
        summary.executed,
        summary.skipped,
        summary.aggregate_rows,
        PathBuf::from(&m.out_dir).join(runner::AGGREGATE_FILE).display()
    );
    if summary.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    eprintln!("{} failed runs:", summary.failures.len());
    for f in &summary.failures {
        eprintln!("  {} seed {}: {}", f.exp_id, f.seed, f.reason);
    }
    Ok(ExitCode::FAILURE)
}

fn grid(args: GridArgs) -> Result<()> {
    let cfg = load_config(args.config, None, None)?;
    let m = manifest(&cfg)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&m.specs)?);
        return Ok(());
    }
    println!("grid {} ({} experiments, seeds {:?}, config {})", m.name, m.specs.len(), cfg.seeds, &m.config_hash[..12]);
    for s in &m.specs {
        let mode = s.finetune_mode.map(|f| f.name()).unwrap_or("");
        println!("{:<5} {:<14} {:<22} {mode}", s.id, s.paradigm.name(), s.label());
    }
    Ok(())
}

fn combos(tasks: &str) -> Result<()> {
    let family = generate_combos(&parse_task_list(tasks)?)?;
    print!("{}", family.table());
    println!("{} combos", family.combos.len());
    if family.insufficient {
        println!("two source tasks give a single combo; meta-training on it needs an explicit override");
    }
    Ok(())
}

fn export_batch(world_seed: u64, tasks: &str, size: usize, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let tasks = parse_task_list(tasks)?;
    let world = make_world(world_seed, WorldConfig::default())?;
    let batch = sample_batch(&world, &tasks, size, seed)?;
    match out {
        Some(p) => {
            let f = std::fs::File::create(&p).with_context(|| p.display().to_string())?;
            batch.write_columnar(f)?;
        }
        None => batch.write_columnar(std::io::stdout().lock())?,
    }
    Ok(())
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(a) => run(a),
        Command::Report { out } => {
            print!("{}", report::render(&out)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Grid(a) => grid(a).map(|_| ExitCode::SUCCESS),
        Command::Combos { tasks } => combos(&tasks).map(|_| ExitCode::SUCCESS),
        Command::ExportBatch {
            world_seed,
            tasks,
            size,
            seed,
            out,
        } => export_batch(world_seed, &tasks, size, seed, out).map(|_| ExitCode::SUCCESS),
    }
}

