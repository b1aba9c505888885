use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use egocast_core::harness::{self, EvalOptions, Predictor, RunConfig};

#[derive(Parser)]
#[command(name = "egocast", version, about = "Egocentric pose estimation and forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Generator seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the current-frame estimator.
    TrainCurrent {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
    },
    /// Train the forecaster on estimator outputs.
    TrainForecast {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: Train,
    },
    /// Evaluate forecasts on the test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = PredictorArg::Model)]
        predictor: PredictorArg,
        /// Also report translation-aligned errors.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = PastArg::Pseudo)]
        past_poses: PastArg,
    },
    /// Train one forecaster per window length and compare 1 s error.
    AblateWindow {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
        windows: Vec<usize>,
    },
    /// Compare informative and null visual features.
    AblateVisual {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// JSON run config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    estimator_checkpoint: Option<PathBuf>,
    #[arg(long)]
    forecaster_checkpoint: Option<PathBuf>,
    /// Full-size architecture for both models.
    #[arg(long)]
    paper_arch: bool,
}

#[derive(Args)]
struct Train {
    #[arg(long, required = true)]
    seed: u64,
    #[arg(long)]
    iterations: Option<usize>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Model,
    GroundTruth,
    GtShifted,
}

#[derive(Clone, Copy, ValueEnum)]
enum PastArg {
    Pseudo,
    GroundTruth,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if self.paper_arch {
            cfg.use_paper_arch();
        }
        if let Some(p) = &self.output {
            cfg.output_dir = p.clone();
        }
        if let Some(p) = &self.train_data {
            cfg.train_data = Some(p.clone());
        }
        if let Some(p) = &self.test_data {
            cfg.test_data = Some(p.clone());
        }
        if let Some(p) = &self.estimator_checkpoint {
            cfg.estimator_checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.forecaster_checkpoint {
            cfg.forecaster_checkpoint = Some(p.clone());
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, seed } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.generator.seed = s;
            }
            let cfg = cfg.resolve()?;
            let s = harness::run_generate(&cfg)?;
            println!("train: {} sequences -> {}", s.train_sequences, s.train.display());
            println!("test: {} sequences -> {}", s.test_sequences, s.test.display());
        }
        Command::TrainCurrent { common, train } => {
            let mut cfg = common.load()?;
            cfg.seed = Some(train.seed);
            if let Some(n) = train.iterations {
                cfg.estimator.iterations = n;
            }
            let s = harness::run_train_current(&cfg.resolve()?, train.resume)?;
            report_train(&s);
        }
        Command::TrainForecast { common, train } => {
            let mut cfg = common.load()?;
            cfg.seed = Some(train.seed);
            if let Some(n) = train.iterations {
                cfg.forecaster.iterations = n;
            }
            let s = harness::run_train_forecast(&cfg.resolve()?, train.resume)?;
            report_train(&s);
        }
        Command::Eval {
            common,
            predictor,
            oracle,
            past_poses,
        } => {
            let cfg = common.load()?.resolve()?;
            let opts = EvalOptions {
                predictor: match predictor {
                    PredictorArg::Model => Predictor::Model,
                    PredictorArg::GroundTruth => Predictor::GroundTruth,
                    PredictorArg::GtShifted => Predictor::GtShifted,
                },
                oracle,
                ground_truth_past: matches!(past_poses, PastArg::GroundTruth),
            };
            let s = harness::with_eval_threads(|| harness::run_eval(&cfg, opts))??;
            if let Some(auc) = s.report.auc_cm {
                println!("auc_cm {auc:.4}");
            }
            for (h, v) in s.report.horizons_s.iter().zip(&s.report.mpjpe_cm) {
                println!("{h:>5} s  {v:.4} cm");
            }
            if let Some(auc) = s.oracle.and_then(|o| o.auc_cm) {
                println!("oracle auc_cm {auc:.4}");
            }
        }
        Command::AblateWindow { common, seed, windows } => {
            let mut cfg = common.load()?;
            cfg.seed = Some(seed);
            let rows = harness::run_ablate_window(&cfg.resolve()?, &windows)?;
            for r in rows {
                println!("k={:<3} {:.4} cm", r.window, r.mpjpe_1s_cm);
            }
        }
        Command::AblateVisual { common, seed } => {
            let mut cfg = common.load()?;
            cfg.seed = Some(seed);
            let rows = harness::run_ablate_visual(&cfg.resolve()?)?;
            for r in rows {
                println!("{:<12} {:.4} cm", r.arm, r.mpjpe_cm);
            }
        }
    }
    Ok(())
}

fn report_train(s: &harness::TrainSummary) {
    if let (Some(first), Some(last)) = (s.trace.first(), s.trace.last()) {
        println!(
            "steps {}..{}  loss {first:.5} -> {last:.5}",
            s.start_step + 1,
            s.start_step + s.trace.len() as u64
        );
    }
    println!("checkpoint {}", s.checkpoint.display());
    println!("loss trace {}", s.loss_csv.display());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()).context("egocast failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
