use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use instcolor::config::RunConfig;
use instcolor::dataset::SyntheticConfig;
use instcolor::pipeline::{cmd_ablate, cmd_colorize, cmd_evaluate, cmd_gen_fixture, cmd_train, TrainOptions};
use instcolor::training::Stage;
use instcolor::Error;

#[derive(Parser)]
#[command(name = "instcolor", version, about = "Instance-aware image colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the three stages in order.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Train only this stage (full, instance, fusion); earlier stages are loaded.
        #[arg(long)]
        stage: Option<Stage>,
        /// Skip stages whose final checkpoint already exists.
        #[arg(long)]
        resume: bool,
    },
    /// Colorize images with the trained model.
    Colorize {
        #[command(flatten)]
        run: RunArgs,
        /// Write per-layer blending weight heatmaps.
        #[arg(long)]
        dump_weights: bool,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Write full-image and instance-level metric reports.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate the variant in the [ablation] section.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write a synthetic dataset and a matching config.toml.
    GenFixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { run, stage, resume } => {
            let s = cmd_train(&run.load()?, &TrainOptions { resume, stage })?;
            for st in &s.loaded {
                println!("loaded {}", st.name());
            }
            for st in &s.trained {
                println!("trained {}", st.name());
            }
        }
        Command::Colorize {
            run,
            dump_weights,
            images,
        } => {
            let out = cmd_colorize(&run.load()?, &images, dump_weights)?;
            for p in out.images.iter().chain(&out.heatmaps) {
                println!("{}", p.display());
            }
        }
        Command::Evaluate { run } => {
            for p in cmd_evaluate(&run.load()?)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { run } => {
            for p in cmd_ablate(&run.load()?)? {
                println!("{}", p.display());
            }
        }
        Command::GenFixture { out, count, size, seed } => {
            let synthetic = SyntheticConfig {
                count,
                size,
                seed: seed.wrapping_add(5),
                ..SyntheticConfig::default()
            };
            println!("{}", cmd_gen_fixture(&out, &synthetic, seed)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} message={:?}", e.kind(), e.to_string());
            ExitCode::FAILURE
        }
    }
}
