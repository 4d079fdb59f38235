use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fmqs::config::PipelineConfig;
use fmqs::pipeline::{self, Predictor};

/// Feature map quality scoring pipeline.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// JSON pipeline config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that relative output paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic run archive.
    Generate,
    /// Score every feature map and write the label dataset.
    Score,
    /// Train the IFEM and BFEM evaluators.
    Train,
    /// Evaluate the trained evaluators on the held-out split.
    Eval {
        /// Predict every label exactly instead of loading checkpoints.
        #[arg(long)]
        label_oracle: bool,
    },
    /// Train the toy downstream model with and without auxiliary losses.
    DemoAux,
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
        cfg.validate()?;
    }
    let paths = cfg.paths.resolve(&cli.out);
    match cli.command {
        Command::Generate => {
            let s = pipeline::generate(&cfg, &paths).context("generate")?;
            println!(
                "archive: {} configs x {} stages x {} samples, IFEM {:?}, BFEM {:?}, {} feature files in {}",
                s.configs,
                s.stages,
                s.samples,
                s.ifem_shape,
                s.bfem_shape,
                s.feature_files,
                s.dir.display()
            );
        }
        Command::Score => {
            println!("alpha = {}, w = {}", cfg.scoring.similarity.alpha, cfg.scoring.w);
            let r = pipeline::score(&cfg, &paths).context("score")?;
            println!("SOTA: {} / stage {} (tied: {})", r.sota_config, r.sota_stage, r.sota_tied);
            println!("{} labels written to {}", r.labels, paths.labels.display());
        }
        Command::Train => {
            for s in pipeline::train(&cfg, &paths).context("train")? {
                println!(
                    "{}: best epoch {} val MSE {:.6}, checkpoint {}",
                    s.module,
                    s.best_epoch,
                    s.best_val_mse,
                    s.checkpoint.display()
                );
            }
        }
        Command::Eval { label_oracle } => {
            let predictor = if label_oracle { Predictor::LabelOracle } else { Predictor::Checkpoint };
            for r in pipeline::eval(&paths, predictor).context("eval")? {
                let m = &r.regression.overall;
                print!(
                    "{}: MSE {:.6} MAE {:.6} R2 {:.4} MAPE {:.3}%",
                    r.regression.module, m.mse, m.mae, m.r_squared, m.mape_percent
                );
                match r.alignment {
                    Some(a) => println!(" matched {:.4} mismatched {:.4} gap {:.4}", a.matched, a.mismatched, a.gap),
                    None => println!(),
                }
            }
        }
        Command::DemoAux => {
            let r = pipeline::demo_aux(&cfg, &paths).context("demo-aux")?;
            for a in &r.arms {
                println!(
                    "{:<9} task metric {:.4} delta {:+.4} ({:+.2}%)",
                    a.config, a.mean_task_metric, a.delta_vs_baseline, a.delta_percent
                );
            }
            for t in &r.fmqs_trend {
                println!(
                    "seed {}: mean predicted FMQS {:.4} -> {:.4}, Spearman {:.3}",
                    t.seed, t.first, t.last, t.spearman
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FMQS_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
