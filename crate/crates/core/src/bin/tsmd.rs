use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tsmd::commands::{self, Overrides};
use tsmd::config::ExperimentConfig;
use tsmd::meta::{TeacherMode, Variant};

#[derive(Parser)]
#[command(
    name = "tsmd",
    version,
    about = "Teacher-student meta distillation for few-shot learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the teacher on the pooled meta-train classes.
    Pretrain(Common),
    /// Meta-train the configured variant.
    MetaTrain(Common),
    /// Evaluate a checkpoint on meta-test episodes.
    MetaTest {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (defaults to OUT/best.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every configured row on shared test episodes.
    Compare(Common),
    /// Run the finite-difference gradient checks.
    Gradcheck,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to resume from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of meta-test episodes.
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    first_order: bool,
    #[arg(long, value_enum)]
    teacher_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Trainable,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Tsmd,
    Maml,
    Reptile,
}

impl Common {
    fn load(&self) -> tsmd::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            episodes: self.episodes,
            first_order: self.first_order,
            teacher_mode: self.teacher_mode.map(|m| match m {
                ModeArg::Trainable => TeacherMode::Trainable,
                ModeArg::Fixed => TeacherMode::Fixed,
            }),
            variant: self.variant.map(|v| match v {
                VariantArg::Tsmd => Variant::Tsmd,
                VariantArg::Maml => Variant::MamlOnly,
                VariantArg::Reptile => Variant::Reptile,
            }),
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> tsmd::Result<()> {
    match cli.command {
        Command::Pretrain(c) => {
            let path = commands::pretrain(&c.load()?, c.resume.as_deref())?;
            println!("teacher written to {}", path.display());
        }
        Command::MetaTrain(c) => {
            let out = commands::meta_train(&c.load()?, c.resume.as_deref())?;
            println!("{} meta-steps, best checkpoint {}", out.steps, out.best.display());
        }
        Command::MetaTest { common, checkpoint } => {
            let cfg = common.load()?;
            let path = checkpoint.unwrap_or_else(|| cfg.io.out_dir.join("best.ckpt"));
            commands::meta_test(&cfg, &path)?;
        }
        Command::Compare(c) => {
            commands::compare(&c.load()?)?;
        }
        Command::Gradcheck => {
            commands::gradcheck()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("TSMD_WORKERS").ok().and_then(|s| s.parse().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
