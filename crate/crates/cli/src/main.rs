use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use trimodal::experiment::{
    cmd_ablate, cmd_evaluate, cmd_generate, cmd_gradcheck, cmd_train, Overrides, RunConfig,
};
use trimodal::Error;

#[derive(Parser)]
#[command(name = "trimodal", version, about = "Triple-modal fusion: generate, train, evaluate, ablate, gradcheck")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its manifest.
    Generate(Common),
    /// Cross-validate the configured model; write checkpoints and metrics.
    Train(Common),
    /// Re-evaluate the checkpoints of a previous train run.
    Evaluate(Common),
    /// Run the modality, module and lambda ablation protocols.
    Ablate(Common),
    /// Finite-difference check of every block and loss.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Existing output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            workers: self.workers,
            lambda: self.lambda,
            alpha: self.alpha,
            epochs: self.epochs,
            batch: self.batch,
        });
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(c) => {
            let out = cmd_generate(&c.load()?)?;
            println!("{} samples -> {} (sha256 {})", out.samples, out.path.display(), out.digest);
        }
        Command::Train(c) => {
            let out = cmd_train(&c.load()?)?;
            let a = &out.aggregate;
            println!(
                "accuracy {:.4} ± {:.4}  f1 {:.4}  auc {}",
                a.accuracy.mean,
                a.accuracy.std,
                a.f1.mean,
                a.auc.map_or("undefined".into(), |s| format!("{:.4} ± {:.4}", s.mean, s.std))
            );
        }
        Command::Evaluate(c) => {
            let out = cmd_evaluate(&c.load()?)?;
            for r in &out.reports {
                println!(
                    "fold {}: accuracy {:.4} auc {}",
                    r.fold.unwrap_or_default(),
                    r.accuracy,
                    r.auc.map_or("undefined".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Ablate(c) => {
            let out = cmd_ablate(&c.load()?)?;
            for r in &out.rows {
                println!(
                    "{:<28} accuracy {:.4} ± {:.4}",
                    r.setting, r.aggregate.accuracy.mean, r.aggregate.accuracy.std
                );
            }
        }
        Command::Gradcheck(c) => {
            let cfg = c.load()?;
            let result = cmd_gradcheck(&cfg);
            if let Ok(report) = &result {
                for check in &report.checks {
                    println!("{:<28} max rel err {:.3e}  pass", check.check, check.max_rel_err);
                }
            }
            result?;
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
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
