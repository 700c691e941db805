use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffprobe::heads::accuracy;
use diffprobe::pipeline::build_feature_set;
use diffprobe::{HeadKind, Parallelism};
use diffprobe_harness::compare::emit_comparison;
use diffprobe_harness::config::DataSource;
use diffprobe_harness::evaluate::{dump_adversarial, run_one};
use diffprobe_harness::{emit_report, run_sweep, Cell, Context, HarnessError, ReportStyle, Result, RunConfig, RunStore};

#[derive(Parser)]
#[command(name = "diffprobe", version, about = "Robustness probes on frozen diffusion features")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Copy)]
struct CellArgs {
    #[arg(long)]
    block: usize,
    #[arg(long)]
    timestep: usize,
    #[arg(long, default_value = "linear")]
    head: HeadKind,
}

impl CellArgs {
    fn cell(self) -> Cell {
        Cell::new(self.head, self.block, self.timestep)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain (or load) the backbone and list its blocks.
    Pretrain,
    /// Train one probe head and report its accuracy.
    TrainHead(CellArgs),
    /// Run one attack on one cell.
    Attack {
        #[command(flatten)]
        cell: CellArgs,
        /// Attack name as it appears in reports, e.g. PGD-20.
        #[arg(long)]
        attack: String,
        /// Write adversarial images and a per-sample table here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Evaluate every grid cell not yet recorded.
    Sweep {
        /// Stop after this many new cells.
        #[arg(long)]
        max_cells: Option<usize>,
    },
    /// Write tables and plots from the recorded cells.
    Report {
        /// Repeatable; all styles when omitted.
        #[arg(long, value_enum)]
        style: Vec<ReportStyle>,
    },
    /// Put desk results next to published reference numbers.
    ComparePaper,
    /// Print the resolved configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// `Ok(true)` on full success, `Ok(false)` when some work failed.
fn run(cli: &Cli) -> Result<bool> {
    let par = Parallelism::default();
    let out = &cli.out;
    match &cli.command {
        Command::ShowConfig => {
            print!("{}", load_config(cli)?.resolve()?.to_toml());
            Ok(true)
        }
        Command::Pretrain => {
            let ctx = Context::prepare(load_config(cli)?, out, par)?;
            let m = ctx.backbone.meta();
            println!(
                "backbone {} ({} steps, held-out loss {:?} -> {:?})",
                &ctx.backbone_sha256[..16],
                m.steps,
                m.initial_loss,
                m.final_loss
            );
            for b in ctx.backbone.blocks() {
                println!("{:>3}  {:<12} {:?}", b.index, b.name, b.shape());
            }
            Ok(true)
        }
        Command::TrainHead(args) => {
            let ctx = Context::prepare(load_config(cli)?, out, par)?;
            let store = ctx.open_store(out)?;
            let cell = args.cell();
            let head = ctx.head(&store, &cell, par)?;
            let test = build_feature_set(&ctx.backbone, &ctx.test, &ctx.spec(&cell), &ctx.schedule, par)?;
            if let Some(last) = head.training_log().last() {
                println!(
                    "epoch {}: train loss {:.4}, train accuracy {:.4}, validation accuracy {}",
                    last.epoch,
                    last.train_loss,
                    last.train_accuracy,
                    last.val_accuracy.map_or("n/a".into(), |a| format!("{a:.4}"))
                );
            }
            println!("{cell}: test accuracy {:.4}", accuracy(&head, &test, par)?);
            Ok(true)
        }
        Command::Attack { cell, attack, dump } => {
            let ctx = Context::prepare(load_config(cli)?, out, par)?;
            let store = ctx.open_store(out)?;
            let cell = cell.cell();
            let cfg = ctx
                .config
                .attacks
                .iter()
                .find(|a| a.name().eq_ignore_ascii_case(attack))
                .ok_or_else(|| {
                    let names: Vec<String> = ctx.config.attacks.iter().map(|a| a.name()).collect();
                    HarnessError::Config(format!("no attack named {attack}; configured: {}", names.join(", ")))
                })?;
            let head = ctx.head(&store, &cell, par)?;
            let model = ctx.classifier(&head, &cell)?;
            let (metric, outcome) = run_one(&ctx, &model, cfg, par);
            match metric.robust_accuracy {
                Some(a) => println!("{cell}: {} robust accuracy {a:.4}", metric.name),
                None => println!("{cell}: {} failed: {}", metric.name, metric.error.as_deref().unwrap_or("")),
            }
            if let (Some(dir), Some(o)) = (dump, &outcome) {
                dump_adversarial(o, &ctx.test, dir)?;
                println!("adversarial examples written to {}", dir.display());
            }
            Ok(metric.error.is_none() && metric.sample_errors == 0)
        }
        Command::Sweep { max_cells } => {
            let ctx = Context::prepare(load_config(cli)?, out, par)?;
            let store = ctx.open_store(out)?;
            let s = run_sweep(&ctx, &store, *max_cells, par)?;
            println!(
                "executed {}, already recorded {}, failed {}, partial {}, remaining {}",
                s.executed.len(),
                s.reused.len(),
                s.failed.len(),
                s.partial.len(),
                s.remaining
            );
            for (c, e) in &s.failed {
                println!("  failed {}: {e}", c.key());
            }
            Ok(s.failed.is_empty() && s.partial.is_empty())
        }
        Command::Report { style } => {
            let store = RunStore::open_existing(out)?;
            let records = store.records()?;
            let styles = if style.is_empty() {
                vec![
                    ReportStyle::AccuracyTable,
                    ReportStyle::BlockAblation,
                    ReportStyle::TimestepAblation,
                ]
            } else {
                style.clone()
            };
            for s in styles {
                for p in emit_report(&records, s, &out.join("reports"))? {
                    println!("{}", p.display());
                }
            }
            Ok(true)
        }
        Command::ComparePaper => {
            let store = RunStore::open_existing(out)?;
            let records = store.records()?;
            let cfg = &store.lock().config;
            let dataset = match cfg.data.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Cifar10 => "CIFAR-10 subset",
                DataSource::Archive => "archive",
            };
            for p in emit_comparison(&records, &cfg.attacks, dataset, &out.join("reports"))? {
                println!("{}", p.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = diffprobe::parallel::with_workers(cli.workers, || run(&cli));
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
