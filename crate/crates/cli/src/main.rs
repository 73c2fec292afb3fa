use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mvpl_cli::config::RunConfig;
use mvpl_cli::run::{self, GenOptions, Prepared, Table};
use mvpl_cli::{exit_code, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use mvpl_core::data::Dataset;
use mvpl_core::trainer::{metrics_header, metrics_row, EvalProtocol};
use mvpl_core::Result;

#[derive(Parser)]
#[command(name = "mvpl", version, about = "Multiview pseudo-labeling experiments on synthetic video")]
struct Cli {
    /// Seed for every random choice; overrides `seed` in a config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a MotionShapes dataset container with a labeled split.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        train_per_class: usize,
        #[arg(long, default_value_t = 25)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 0.1)]
        labeled_fraction: f64,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        /// Frame side in pixels.
        #[arg(long, default_value_t = 20)]
        size: usize,
    },
    /// Precompute flow and temporal-gradient views into a container.
    ExtractViews {
        #[arg(long)]
        data: PathBuf,
        /// Defaults to rewriting `--data` (needs --force).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 15.0)]
        alpha: f64,
        #[arg(long, default_value_t = 100)]
        iterations: usize,
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Train one configuration and write config, metrics and checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Top-1 of a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        clips: usize,
        #[arg(long, default_value_t = 1)]
        crops: usize,
        #[arg(long, default_value_t = 256.0 / 224.0)]
        scale: f64,
    },
    /// Finite-difference gradient checks of every op and the model.
    Gradcheck,
    /// Run an ablation grid and write a summary table.
    Ablate {
        /// 1a (methods), 1b (views), 1c (strategies) or a1 (warm-up).
        #[arg(long)]
        table: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Seeds averaged per row; defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Warm-up epochs on a 600-epoch schedule, rescaled to `epochs`.
        #[arg(long, value_delimiter = ',', default_value = "0,20,40,80,160")]
        warmups: Vec<usize>,
    },
}

fn load_config(path: Option<&Path>, set: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for s in set {
        cfg.apply(s)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.train_config()?;
    Ok(cfg)
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let prep = Prepared::new(Dataset::read(&cfg.dataset)?, cfg)?;
    if prep.computed_views {
        eprintln!(
            "warning: {} has no stored views for these flow parameters; computed them on the fly (run extract-views to store them)",
            cfg.dataset.display()
        );
    }
    Ok(prep)
}

fn execute(cli: Cli) -> Result<i32> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData {
            out,
            train_per_class,
            eval_per_class,
            labeled_fraction,
            frames,
            size,
        } => {
            let mut opts = GenOptions {
                train_per_class,
                eval_per_class,
                labeled_fraction,
                seed: seed.unwrap_or(0),
                ..GenOptions::default()
            };
            opts.spec.frames = frames;
            opts.spec.height = size;
            opts.spec.width = size;
            let ds = run::gen_data(&out, &opts, cli.force)?;
            println!(
                "wrote {} clips ({} labeled) to {}",
                ds.len(),
                ds.manifest.labeled_indices().len(),
                out.display()
            );
        }
        Command::ExtractViews {
            data,
            out,
            alpha,
            iterations,
            levels,
        } => {
            let params = mvpl_core::views::FlowParams {
                alpha,
                iterations,
                levels,
            };
            let out = out.unwrap_or_else(|| data.clone());
            let ds = run::extract_views(&data, &out, &params, cli.force)?;
            println!("stored flow and tg views for {} clips in {}", ds.len(), out.display());
        }
        Command::Train { config, set } => {
            let cfg = load_config(config.as_deref(), &set, seed)?;
            let prep = prepare(&cfg)?;
            println!("{}", metrics_header(&cfg.views));
            let outcome = run::train_to_dir(&prep, &cfg, cli.force, |m| println!("{}", metrics_row(m)))?;
            if let Some(top1) = outcome.top1() {
                println!("top1 {top1}");
            }
        }
        Command::Eval {
            checkpoint,
            data,
            clips,
            crops,
            scale,
        } => {
            let protocol = EvalProtocol { clips, crops, scale };
            println!("top1 {}", run::evaluate_checkpoint(&checkpoint, &data, &protocol)?);
        }
        Command::Gradcheck => {
            let cases = run::gradcheck()?;
            let mut ok = true;
            for c in &cases {
                let r = &c.report;
                println!(
                    "{:<28} {} max_rel_error {:.3e} over {} elements",
                    c.name,
                    if r.passed { "pass" } else { "FAIL" },
                    r.max_rel_error,
                    r.checked
                );
                ok &= r.passed;
            }
            if !ok {
                return Ok(EXIT_RUNTIME);
            }
        }
        Command::Ablate {
            table,
            config,
            set,
            seeds,
            warmups,
        } => {
            let table = Table::parse(&table)?;
            let cfg = load_config(config.as_deref(), &set, seed)?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let prep = prepare(&cfg)?;
            let rows = run::ablate(&prep, table, &cfg, &seeds, &warmups, cli.force, |name, s, acc| {
                println!("{name} seed {s}: top1 {acc}")
            })?;
            print!("{}", run::summary_csv(&rows, &seeds));
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}

