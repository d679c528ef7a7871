//! `worldmodel` command-line driver: data generation, training, rollouts,
//! novel-view synthesis, mask dumps, evaluation and benchmarks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use worldmodel::geometry::Vec3;
use worldmodel::model::{Causality, PositionMode, SpatioTemporal};

use crate::commands::{BenchArgs, EvalArgs, RolloutArgs, TrainArgs};
use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "worldmodel", version, about = "Multi-view driving world model on a ray-cast toy world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum VariantArg {
    PrefixScales,
    SameScale,
    AllScales,
}

impl From<VariantArg> for Causality {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::PrefixScales => Causality::PrefixScales,
            VariantArg::SameScale => Causality::SameScale,
            VariantArg::AllScales => Causality::AllScales,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum StArg {
    Global,
    Decoupled,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PosArg {
    RelativeRay,
    AbsoluteRay,
    None,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Variants {
    /// Scale causality of the attention mask.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Spatio-temporal attention module.
    #[arg(long, value_enum)]
    st: Option<StArg>,
    /// Position encoding.
    #[arg(long, value_enum)]
    pos: Option<PosArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a toy-world dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Frames per scene.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Train the tokenizer (unless the initial checkpoint has one) and one model stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        variants: Variants,
        /// Dataset root from `gen-data`; rendered in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Initial checkpoint, e.g. the clip stage before a recurrent stage.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Recurrent cache size in frames.
        #[arg(long)]
        cache: Option<usize>,
        /// Frames per rendered scene when no dataset is given.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Generate a video on the poses of a scene.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory; a scene is sampled from the seed when absent.
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        cache: Option<usize>,
    },
    /// Generate from conditions alone with every camera shifted in the ego frame.
    Nvs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ego-frame shift in meters (x forward, y left, z up).
        #[arg(long, value_parser = commands::parse_shift, allow_hyphen_values = true)]
        shift: Vec3,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        cache: Option<usize>,
    },
    /// Print the step-level attention mask as a text grid.
    DumpMask {
        #[arg(long, value_enum, default_value = "prefix_scales")]
        variant: VariantArg,
        #[arg(long, default_value_t = 2)]
        frames: usize,
        #[arg(long, default_value_t = 2)]
        scales: usize,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predicted frames against ground truth and write a metric CSV.
    Eval {
        /// Ground-truth scene directory or dataset root.
        #[arg(long)]
        scene: PathBuf,
        /// Predicted frames: a rollout or scene directory, or a root with one per scene.
        #[arg(long)]
        pred: PathBuf,
        /// Adds per-scale bit accuracy using this checkpoint's tokenizer.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output `.csv` file or directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Time generation and decoding.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        frames: usize,
        #[arg(long)]
        cache: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common, variants: Option<&Variants>, cache: Option<usize>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(v) = variants {
        if let Some(x) = v.variant {
            cfg.train.causality = x.into();
        }
        if let Some(x) = v.st {
            cfg.train.spatio_temporal = match x {
                StArg::Global => SpatioTemporal::Global,
                StArg::Decoupled => SpatioTemporal::Decoupled,
                StArg::None => SpatioTemporal::None,
            };
        }
        if let Some(x) = v.pos {
            cfg.train.position = match x {
                PosArg::RelativeRay => PositionMode::RelativeRay,
                PosArg::AbsoluteRay => PositionMode::AbsoluteRay,
                PosArg::None => PositionMode::None,
            };
        }
    }
    if let Some(m) = cache {
        cfg.train.cache = m;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_or_print(out: Option<&std::path::Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(parent) = p.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(p, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out, frames } => {
            let mut cfg = load_config(&common, None, None)?;
            if let Some(n) = frames {
                cfg.data.frames = n;
            }
            commands::gen_data(&cfg, &out, common.seed)
        }
        Command::Train {
            common,
            variants,
            data,
            checkpoint,
            out,
            cache,
            frames,
        } => {
            let mut cfg = load_config(&common, Some(&variants), cache)?;
            if let Some(n) = frames {
                cfg.data.frames = n;
            }
            commands::train(
                &cfg,
                &TrainArgs {
                    data: data.as_deref(),
                    init: checkpoint.as_deref(),
                    out: &out,
                    seed: common.seed,
                },
            )
        }
        Command::Rollout {
            common,
            checkpoint,
            scene,
            out,
            frames,
            cache,
        } => {
            let cfg = load_config(&common, None, None)?;
            commands::rollout(
                &cfg,
                &RolloutArgs {
                    checkpoint: &checkpoint,
                    scene: scene.as_deref(),
                    out: &out,
                    seed: common.seed,
                    frames,
                    cache,
                    shift: None,
                },
            )
        }
        Command::Nvs {
            common,
            checkpoint,
            scene,
            out,
            shift,
            frames,
            cache,
        } => {
            let cfg = load_config(&common, None, None)?;
            commands::rollout(
                &cfg,
                &RolloutArgs {
                    checkpoint: &checkpoint,
                    scene: scene.as_deref(),
                    out: &out,
                    seed: common.seed,
                    frames,
                    cache,
                    shift: Some(shift),
                },
            )
        }
        Command::DumpMask {
            variant,
            frames,
            scales,
            out,
        } => write_or_print(out.as_deref(), &commands::dump_mask(variant.into(), frames, scales)?),
        Command::Eval {
            scene,
            pred,
            checkpoint,
            out,
        } => commands::eval(&EvalArgs {
            scene: &scene,
            pred: &pred,
            checkpoint: checkpoint.as_deref(),
            out: &out,
        }),
        Command::Bench {
            common,
            checkpoint,
            frames,
            cache,
            out,
        } => {
            let cfg = load_config(&common, None, cache)?;
            let report = commands::bench(
                &cfg,
                &BenchArgs {
                    checkpoint: checkpoint.as_deref(),
                    seed: common.seed,
                    frames,
                    cache,
                },
            )?;
            write_or_print(out.as_deref(), &report)
        }
    }
}

/// Exit status: 1 for runtime errors, 3 for unreadable checkpoints. Clap exits with 2 on bad flags.
fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let corrupt = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<worldmodel::Error>(), Some(worldmodel::Error::Checkpoint(_))));
            ExitCode::from(if corrupt { 3 } else { 1 })
        }
    }
}
