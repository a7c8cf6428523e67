use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mfnet_cli::commands::{self, confusion_csv, gradcheck_table, sweep_csv};
use mfnet_cli::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "mfnet", about = "Motion feature network experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. --set optim.lr=0.01 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Shorthand for --set motion.variant=<sum|concat|off>.
    #[arg(long)]
    motion: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            config.set_assignment(o)?;
        }
        if let Some(m) = &self.motion {
            config.set("motion.variant", m)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as frame folders under data.path.
    GenData(Common),
    /// Train a model, writing metrics and checkpoints to out_dir.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference checks of every op and a toy full graph.
    Gradcheck(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let s = commands::gen_data(&common.resolve()?)?;
            println!("root,{}", s.root.display());
            println!("split,{}", (0..s.train_counts.len()).map(|c| format!("class{c}")).collect::<Vec<_>>().join(","));
            for (name, counts) in [("train", &s.train_counts), ("val", &s.val_counts)] {
                let cells: Vec<String> = counts.iter().map(ToString::to_string).collect();
                println!("{name},{}", cells.join(","));
            }
        }
        Command::Train { common, resume } => {
            let config = common.resolve()?;
            let s = commands::train(&config, resume.as_deref())?;
            if let (Some(t), Some(e)) = (s.last_train, s.last_eval) {
                println!("train_loss={} train_top1={}", t.loss, t.top1);
                println!("val_loss={} val_top1={} val_top5={}", e.loss, e.top1, e.top5);
            }
            println!("metrics={}", s.metrics_path.display());
            println!("checkpoint={}", s.checkpoint_path.display());
        }
        Command::Eval { common, checkpoint } => {
            let config = common.resolve()?;
            let s = commands::eval(&config, &checkpoint)?;
            println!("k_eval={} top1={} top5={}", config.k_eval, s.report.top1, s.report.top5);
            print!("{}", confusion_csv(&s.report, &s.class_names));
            if !s.sweep.is_empty() {
                print!("{}", sweep_csv(&s.sweep));
            }
        }
        Command::Gradcheck(common) => {
            let reports = commands::gradcheck(&common.resolve()?)?;
            print!("{}", gradcheck_table(&reports));
            commands::gradcheck_verdict(&reports)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
