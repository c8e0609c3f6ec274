use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use paraformer::attention::{verify_equivalence, EQUIVALENCE_TOL};
use paraformer::checkpoint;
use paraformer::config::RunConfig;
use paraformer::export;
use paraformer::lifecycle;
use paraformer::model::ParaFormerModel;
use paraformer::runtime::bench_inference;
use paraformer::trainer::{evaluate_stages, Schedule, StageMetrics, Trainer};
use paraformer::Error;

#[derive(Parser)]
#[command(name = "paraformer", version, about = "Shallow branch-parallel transformer toolkit")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. --set width=64.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model and write metrics and a checkpoint.
    Train {
        #[arg(long, value_parser = ["progressive", "milestone", "joint"])]
        schedule: Option<String>,
    },
    /// Per-stage loss and accuracy of a checkpoint on the test split.
    Eval,
    /// Time branch-parallel inference for each configured worker count.
    Bench {
        /// Benchmark a freshly initialized model instead of the checkpoint.
        #[arg(long)]
        fresh: bool,
    },
    /// Keep the first K branches of a checkpoint.
    Compress {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        keep: u64,
        #[arg(long)]
        out: PathBuf,
        /// Retrain only the aggregator for this many epochs afterwards.
        #[arg(long, default_value_t = 0)]
        finetune_epochs: usize,
    },
    /// Add a branch, fine-tune on a new data shard, report retention.
    Expand {
        #[arg(long)]
        freeze: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Check multi-head attention against its closed-form linear operator.
    VerifyClosedform {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        tokens: usize,
        #[arg(long)]
        width: usize,
        #[arg(long)]
        heads: usize,
    },
    /// Write pooled per-branch features of the test split to CSV.
    ExportFeatures,
}

enum Failure {
    Usage(String),
    Data(String),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Stage { .. } | Error::BranchIndex { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn print_stages(rows: &[StageMetrics]) {
    println!("stage  loss      accuracy");
    for r in rows {
        println!("{:<6} {:<9.5} {:.4}", r.stage, r.loss, r.accuracy);
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p).map_err(|e| match e {
            Error::Io { .. } => Failure::Data(e.to_string()),
            other => Failure::Usage(other.to_string()),
        })?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        cfg.apply_override(kv).map_err(|e| Failure::Usage(e.to_string()))?;
    }

    match cli.command {
        Command::VerifyClosedform {
            seed,
            tokens,
            width,
            heads,
        } => {
            let r = verify_equivalence(seed, tokens, width, heads).map_err(|e| Failure::Usage(e.to_string()))?;
            println!("max_abs_err={:e}", r.max_abs_err);
            if !r.pass {
                return Err(Failure::Verification(format!(
                    "max_abs_err {:e} exceeds {EQUIVALENCE_TOL:e}",
                    r.max_abs_err
                )));
            }
        }
        Command::Train { schedule } => {
            if let Some(s) = schedule {
                cfg.train.schedule = Schedule::parse(&s).expect("validated by clap");
            }
            cfg.model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            cfg.train
                .validate(cfg.model.n_branches)
                .map_err(|e| Failure::Usage(e.to_string()))?;
            let splits = cfg.data.load()?;
            let mut model = ParaFormerModel::<f32>::init(cfg.model.clone())?;
            info!(
                "training {} params, {} schedule, {} train / {} test samples",
                model.param_count(),
                cfg.train.schedule.name(),
                splits.train.len(),
                splits.test.len()
            );
            let mut trainer = Trainer::new(cfg.train.clone());
            let rows = trainer.fit_with(&mut model, &splits.train, Some(&splits.test), |rows| {
                for r in rows {
                    info!(
                        "epoch {} stage {} {}: loss {:.4} acc {:.4}",
                        r.epoch,
                        r.stage,
                        r.split.name(),
                        r.loss,
                        r.accuracy
                    );
                }
            })?;
            export::write_metrics_csv(&rows, &cfg.metrics_csv)?;
            checkpoint::save(&model, &cfg.checkpoint)?;
            let last_epoch = cfg.train.epochs;
            let last: Vec<_> = rows
                .into_iter()
                .filter(|r| r.epoch == last_epoch && r.split.name() == "test")
                .collect();
            print_stages(&last);
            println!("metrics: {}", cfg.metrics_csv.display());
            println!("checkpoint: {}", cfg.checkpoint.display());
        }
        Command::Eval => {
            let model = checkpoint::load::<f32>(&cfg.checkpoint)?;
            let splits = cfg.data.load()?;
            model.check_data(&splits.test)?;
            print_stages(&evaluate_stages(&model, &splits.test, cfg.train.eval_batch_size)?);
        }
        Command::Bench { fresh } => {
            let model = if fresh {
                ParaFormerModel::<f32>::init(cfg.model.clone())?
            } else {
                checkpoint::load::<f32>(&cfg.checkpoint)?
            };
            let splits = cfg.data.load()?;
            model.check_data(&splits.test)?;
            let reports = bench_inference(&model, &splits.test, &cfg.pool_configs())?;
            println!("workers  median_ms   speedup  outputs_match");
            for r in &reports {
                println!("{:<8} {:<11.3} {:<8.3} {}", r.workers, r.median_ms, r.speedup, r.outputs_match);
            }
            export::write_bench_csv(&reports, &cfg.bench_csv)?;
            println!("bench: {}", cfg.bench_csv.display());
        }
        Command::Compress {
            keep,
            out,
            finetune_epochs,
        } => {
            let model = checkpoint::load::<f32>(&cfg.checkpoint)?;
            let mut small = lifecycle::compress_keep_prefix(&model, keep as usize)?;
            if finetune_epochs > 0 {
                let splits = cfg.data.load()?;
                let mut tc = cfg.train.clone();
                tc.epochs = finetune_epochs;
                tc.schedule = Schedule::Joint;
                tc.aggregator_only = true;
                Trainer::new(tc).fit(&mut small, &splits.train, None)?;
            }
            checkpoint::save(&small, &out)?;
            println!(
                "kept {} of {} branches (ratio {:.2}), params {} -> {}",
                keep,
                model.n_branches(),
                lifecycle::compression_ratio(model.n_branches(), keep as usize),
                model.param_count(),
                small.param_count()
            );
        }
        Command::Expand { freeze, out, seed } => {
            let model = checkpoint::load::<f32>(&cfg.checkpoint)?;
            let splits = cfg.data.load()?;
            if splits.new_shard.is_empty() {
                return Err(Failure::Data("no samples left for a new training shard".into()));
            }
            let (expanded, _, report) =
                lifecycle::expand_and_finetune(&model, &splits.train, &splits.new_shard, &cfg.train, seed, freeze)?;
            checkpoint::save(&expanded, &out)?;
            print!("{}", report.render());
        }
        Command::ExportFeatures => {
            let model = checkpoint::load::<f32>(&cfg.checkpoint)?;
            let splits = cfg.data.load()?;
            let rows =
                export::write_features_csv(&model, &splits.test, &cfg.features_csv, cfg.train.eval_batch_size)?;
            println!("{rows} rows written to {}", cfg.features_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Verification(msg)) => {
            eprintln!("verification failed: {msg}");
            ExitCode::from(3)
        }
    }
}
