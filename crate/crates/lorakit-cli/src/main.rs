//! `lorakit` — train, adapt, merge, switch, analyze, budget, and bench
//! low-rank model adaptations at desk scale.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lorakit_cli::bench::BenchConfig;
use lorakit_cli::commands;
use lorakit_cli::error::{CliError, Result};
use lorakit_cli::presets;
use lorakit_cli::runconfig::RunConfig;
use lorakit_core::adapters::AttnWeight;
use lorakit_core::model::Task;
use lorakit_core::CoreError;

#[derive(Parser)]
#[command(
    name = "lorakit",
    about = "Low-rank adaptation toolkit: injection, training, merging, task switching, \
             budgets, subspace analysis, and latency benchmarking at desk scale",
    version
)]
struct Cli {
    /// Run configuration file (key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, metrics, and reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for analysis sweeps.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train the toy model from scratch.
    Pretrain,
    /// Adapt a pre-trained checkpoint with the configured strategy.
    Adapt {
        /// Pre-trained full-model checkpoint.
        #[arg(long)]
        base: PathBuf,
    },
    /// Evaluate a checkpoint (optionally with a delta) on a task.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        delta: Option<PathBuf>,
        /// Task name: pretrain-copy, reverse, or kv-lookup.
        #[arg(long, default_value = "reverse")]
        task: String,
        #[arg(long)]
        n_pairs: Option<usize>,
    },
    /// Fold a delta into a base model, producing a standalone checkpoint.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        delta: PathBuf,
    },
    /// Swap the delta merged in a deployed model for another one.
    Switch {
        /// Full model currently containing --old merged.
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        old: PathBuf,
        #[arg(long)]
        new: PathBuf,
    },
    /// Subspace, seed-pair, projection, or rank-sweep analysis.
    Analyze {
        /// One of: subspace, seedpair, projection, ranksweep.
        #[arg(long)]
        mode: String,
        /// Left delta checkpoint (subspace/seedpair).
        #[arg(long)]
        left: Option<PathBuf>,
        /// Right delta checkpoint (subspace/seedpair).
        #[arg(long)]
        right: Option<PathBuf>,
        /// Base full-model checkpoint (projection/ranksweep).
        #[arg(long)]
        base: Option<PathBuf>,
        /// Delta checkpoint (projection).
        #[arg(long)]
        delta: Option<PathBuf>,
        /// Random-baseline draws (seedpair).
        #[arg(long, default_value_t = 100)]
        draws: usize,
        /// Comma-separated ranks (ranksweep).
        #[arg(long)]
        ranks: Option<String>,
        /// Comma-separated target sets like qv,q (ranksweep).
        #[arg(long)]
        targets: Option<String>,
    },
    /// Trainable-parameter and checkpoint-size budgets.
    Budget {
        /// Named preset (toy, gpt3-175b, roberta-base, roberta-large,
        /// gpt2-medium); ignored if --config is given.
        preset: String,
        /// Strategy specs such as lora:r=8:qv or adapterH:r=1.
        strategies: Vec<String>,
        /// Also write the table as CSV under --out.
        #[arg(long)]
        csv: bool,
    },
    /// Inference-latency grid and training-throughput probe.
    Bench {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Comma-separated batch x seq points, e.g. 1x128,32x4.
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated adapter/rank sizes.
        #[arg(long)]
        sizes: Option<String>,
    },
    /// Rank sweep shortcut (same as analyze --mode ranksweep).
    Ranksweep {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        ranks: Option<String>,
        #[arg(long)]
        targets: Option<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn require_config(cli: &Cli) -> Result<RunConfig> {
    if cli.config.is_none() {
        return Err(CliError::Core(CoreError::Config(
            "this command requires --config PATH".into(),
        )));
    }
    load_config(cli)
}

fn parse_ranks(s: Option<&str>) -> Result<Vec<usize>> {
    let text = s.unwrap_or("1,2,4,8");
    text.split(',')
        .map(|r| {
            r.trim().parse::<usize>().map_err(|_| {
                CliError::Core(CoreError::Config(format!("bad rank '{r}'")))
            })
        })
        .collect()
}

fn parse_targets(s: Option<&str>) -> Result<Vec<Vec<AttnWeight>>> {
    let text = s.unwrap_or("qv,q");
    text.split(',')
        .map(|set| {
            set.trim()
                .chars()
                .map(|c| AttnWeight::parse(&c.to_string()).map_err(CliError::from))
                .collect()
        })
        .collect()
}

fn parse_grid(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|point| {
            let (b, l) = point.trim().split_once('x').ok_or_else(|| {
                CliError::Core(CoreError::Config(format!(
                    "bad grid point '{point}', expected BATCHxSEQ"
                )))
            })?;
            let parse = |v: &str| {
                v.parse::<usize>().map_err(|_| {
                    CliError::Core(CoreError::Config(format!("bad grid number '{v}'")))
                })
            };
            Ok((parse(b)?, parse(l)?))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Pretrain => {
            let cfg = require_config(&cli)?;
            commands::cmd_pretrain(&cfg, &cli.out)
        }
        Cmd::Adapt { base } => {
            let cfg = require_config(&cli)?;
            commands::cmd_adapt(&cfg, base, &cli.out)
        }
        Cmd::Eval { model, delta, task, n_pairs } => {
            let task = Task::parse(task)?;
            let seed = cli.seed.unwrap_or(42);
            commands::cmd_eval(model, delta.as_deref(), task, seed, *n_pairs)?;
            Ok(())
        }
        Cmd::Merge { base, delta } => {
            commands::cmd_merge(base, delta, &cli.out)?;
            Ok(())
        }
        Cmd::Switch { base, old, new } => {
            commands::cmd_switch(base, old, new, &cli.out)?;
            Ok(())
        }
        Cmd::Analyze { mode, left, right, base, delta, draws, ranks, targets } => {
            let need = |opt: &Option<PathBuf>, what: &str| {
                opt.clone().ok_or_else(|| {
                    CliError::Core(CoreError::Config(format!(
                        "analyze --mode {mode} requires --{what}"
                    )))
                })
            };
            match mode.as_str() {
                "subspace" => commands::cmd_analyze_subspace(
                    &need(left, "left")?,
                    &need(right, "right")?,
                    &cli.out,
                ),
                "seedpair" => commands::cmd_analyze_seedpair(
                    &need(left, "left")?,
                    &need(right, "right")?,
                    *draws,
                    &cli.out,
                ),
                "projection" => commands::cmd_analyze_projection(
                    &need(base, "base")?,
                    &need(delta, "delta")?,
                    &cli.out,
                ),
                "ranksweep" => {
                    let cfg = require_config(&cli)?;
                    commands::cmd_ranksweep(
                        &cfg,
                        &need(base, "base")?,
                        &parse_ranks(ranks.as_deref())?,
                        &parse_targets(targets.as_deref())?,
                        cli.threads,
                        &cli.out,
                    )
                }
                other => Err(CliError::Core(CoreError::Config(format!(
                    "unknown analysis mode '{other}'"
                )))),
            }
        }
        Cmd::Budget { preset, strategies, csv } => {
            let config = match &cli.config {
                Some(path) => RunConfig::load(path)?.model,
                None => presets::lookup(preset)?,
            };
            let csv_path = csv.then(|| cli.out.join("budget.csv"));
            commands::cmd_budget(config, strategies, csv_path.as_deref())?;
            Ok(())
        }
        Cmd::Bench { trials, grid, sizes } => {
            let mut cfg = BenchConfig { trials: *trials, ..BenchConfig::default() };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(g) = grid {
                cfg.grid = parse_grid(g)?;
            }
            if let Some(s) = sizes {
                cfg.sizes = parse_ranks(Some(s))?;
            }
            commands::cmd_bench(&cfg, &cli.out)
        }
        Cmd::Ranksweep { base, ranks, targets } => {
            let cfg = require_config(&cli)?;
            commands::cmd_ranksweep(
                &cfg,
                base,
                &parse_ranks(ranks.as_deref())?,
                &parse_targets(targets.as_deref())?,
                cli.threads,
                &cli.out,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
