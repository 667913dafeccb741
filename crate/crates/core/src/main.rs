use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use codestack::cli::{self, Overrides, RunConfig, SweepManifest};
use codestack::codegrid::Token;
use codestack::metrics::BenchWorkload;
use codestack::model::Variant;
use codestack::Result;

#[derive(Parser)]
#[command(
    name = "codestack",
    version,
    about = "Multi-codebook decoding heads on a synthetic task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run config; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    variant: Option<Variant>,
    /// Frame stacking factor S.
    #[arg(long, global = true)]
    stack: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    /// Run seed (CODESTACK_SEED overrides the config file, this flag overrides both).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// MaskGIT unmasking iterations P.
    #[arg(long, global = true)]
    maskgit_steps: Option<usize>,
    #[arg(long, global = true)]
    cfg_scale: Option<f64>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    top_k: Option<usize>,
    #[arg(long, global = true)]
    max_frames: Option<usize>,
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            variant: self.variant,
            stack: self.stack,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            maskgit_steps: self.maskgit_steps,
            cfg_scale: self.cfg_scale,
            temperature: self.temperature,
            top_k: self.top_k,
            max_frames: self.max_frames,
            eval_episodes: self.episodes,
            checkpoint_dir: self.checkpoint_dir.clone(),
            output_dir: self.output_dir.clone(),
        }
    }

    fn resolve(&self) -> Result<RunConfig> {
        cli::resolve_config(self.config.as_deref(), &self.overrides())
    }

    /// Config for commands that read a checkpoint: without `--config`, the
    /// run config stored by `train` is the base.
    fn resolve_for(&self, checkpoint: &Path) -> Result<RunConfig> {
        if self.config.is_none() {
            let loaded = cli::load_checkpoint(checkpoint)?;
            if let Some(stored) = cli::checkpoint_run_config(&loaded.extra) {
                return cli::finalize_config(stored, &self.overrides());
            }
        }
        self.resolve()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one head and write checkpoints and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate from held-out conditions and write metrics CSV/JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Measure generation throughput and write bench.csv.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Label of the row speedups are relative to (e.g. parallel_s1).
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 512)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Generate one grid for a condition.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated condition symbols.
        #[arg(long, value_delimiter = ',', required = true)]
        condition: Vec<Token>,
        #[arg(long, default_value = "grid.json")]
        out: PathBuf,
    },
    /// Print a checkpoint summary.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate every (variant, S, P) entry of a manifest.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Manifest JSON; defaults to {parallel, MaskGIT, AR} × {1, 2, 4}.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Seeds for the default manifest.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Write synthetic training episodes as JSON lines.
    Data {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value = "episodes.jsonl")]
        out: PathBuf,
    },
    /// Print the resolved run config.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = common.resolve()?;
            let out = cli::cmd_train(&cfg, resume.as_deref())?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
                out.steps,
                out.initial_loss,
                out.final_loss,
                out.checkpoint.display()
            );
        }
        Command::Eval { common, checkpoint } => {
            let cfg = common.resolve_for(&checkpoint)?;
            let r = cli::cmd_eval(&cfg, &checkpoint)?;
            println!(
                "{} S={}: fd {:.4} (floor {:.4}), joint KL {:.4}, TV {:.4}, tf accuracy {:.4}",
                r.variant,
                r.stack,
                r.fd,
                r.fd_reference_floor,
                r.joint_kl,
                r.joint_tv,
                r.tf_accuracy
            );
        }
        Command::Bench {
            common,
            checkpoints,
            baseline,
            reps,
            frames,
            batch,
        } => {
            let cfg = common.resolve()?;
            let workload = BenchWorkload {
                batch,
                frames,
                reps,
                warmup: 1,
            };
            for r in cli::cmd_bench(&cfg, &checkpoints, baseline.as_deref(), &workload)? {
                println!(
                    "{}: {:.1} frames/s, speedup {:.2}",
                    r.label, r.frames_per_second, r.speedup
                );
            }
        }
        Command::Generate {
            common,
            checkpoint,
            condition,
            out,
        } => {
            let cfg = common.resolve_for(&checkpoint)?;
            let g = cli::cmd_generate(&cfg, &checkpoint, &condition, &out)?;
            println!(
                "{} frames{} -> {}",
                g.grid.frames(),
                if g.truncated { " (truncated)" } else { "" },
                out.display()
            );
        }
        Command::Inspect { checkpoint } => {
            println!(
                "{}",
                serde_json::to_string_pretty(&cli::cmd_inspect(&checkpoint)?)?
            );
        }
        Command::Sweep {
            common,
            manifest,
            seeds,
        } => {
            let cfg = common.resolve()?;
            let manifest = match manifest {
                Some(p) => SweepManifest::load(&p)?,
                None => SweepManifest::default_grid(seeds),
            };
            let reports = cli::cmd_sweep(&cfg, &manifest)?;
            for r in reports {
                println!(
                    "{} S={} seed {}: fd {:.4}, joint KL {:.4}",
                    r.variant, r.stack, r.seed, r.fd, r.joint_kl
                );
            }
        }
        Command::Data { common, count, out } => {
            let cfg = common.resolve()?;
            cli::cmd_data(&cfg, count, &out)?;
            println!("{count} episodes -> {}", out.display());
        }
        Command::Config { common } => {
            println!("{}", common.resolve()?.to_json());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
