use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpn::checks::{self, Suite};
use dpn::config::RunConfig;
use dpn::dataset::{self, Dataset, Split};
use dpn::trainer::{self, RunOptions, RunPaths};
use dpn::{decisions, Result, RunError};

#[derive(Parser)]
#[command(name = "dpn", version, about = "Decision propagation network toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set model.with_dpm=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, checkpoints and the resolved config.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs are complete.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint directory; defaults to the run's best checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a double-precision verification suite: gradcheck, oracle or sampler.
    Check { suite: String },
    /// Export per-sample DPM decisions as CSV.
    DumpDecisions {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Use only the first N samples of the split.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute per-channel mean/std of the training split.
    DatasetStats {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Manifest path; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn deterministic() -> bool {
    std::env::var("DPN_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn checkpoint_or(cfg: &RunConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| RunPaths::new(&cfg.output_dir).best())
}

fn eval_policy(cfg: &RunConfig, ds: &Dataset) -> Result<dpn_core::data::AugmentPolicy> {
    let stats = dataset::resolve_stats(cfg, ds)?;
    let stored = cfg.output_dir.join("dataset_stats.json");
    let stats = if cfg.stats_path.is_none() && stored.exists() {
        dataset::read_stats(&stored)?
    } else {
        stats
    };
    Ok(cfg.augment_policy(&stats))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { cfg, resume, stop_after } => {
            let cfg = cfg.load()?;
            let ds = Dataset::load(&cfg)?;
            let stats = dataset::resolve_stats(&cfg, &ds)?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| RunError::io(&cfg.output_dir, e))?;
            dataset::write_stats(&cfg.output_dir.join("dataset_stats.json"), &stats)?;
            let opts = RunOptions {
                deterministic: deterministic(),
                resume,
                stop_after,
            };
            let summary = trainer::train::<f32>(&cfg, &ds, &opts)?;
            match &summary.best {
                Some(b) => println!(
                    "completed {} epochs, {} steps; best top-1 {:.4} at epoch {}",
                    summary.completed_epochs, summary.steps, b.top1, b.epoch
                ),
                None => println!("completed {} epochs", summary.completed_epochs),
            }
            if let Some(c) = summary.coherence {
                println!(
                    "final DPM coherence: within-class std {:.4}, overall std {:.4}",
                    c.within_class_std, c.overall_std
                );
            }
        }
        Cmd::Eval { cfg, checkpoint } => {
            let cfg = cfg.load()?;
            let ds = Dataset::load(&cfg)?;
            let policy = eval_policy(&cfg, &ds)?;
            let model = trainer::load_model::<f32>(&cfg, &checkpoint_or(&cfg, checkpoint))?;
            let r = trainer::evaluate(&model, &ds.test, &policy, cfg.eval_batch_size)?;
            println!("top1 {:.4} top5 {:.4} n {}", r.acc.top1_rate(), r.acc.top5_rate(), r.acc.total);
        }
        Cmd::Check { suite } => {
            let suite: Suite = suite.parse()?;
            let report = checks::run(suite)?;
            for c in &report.cases {
                println!("{} {} max_error {:e}", if c.passed() { "ok  " } else { "FAIL" }, c.name, c.max_error);
            }
            println!(
                "{} cases, {} failed, max error {:e}",
                report.cases.len(),
                report.failures(),
                report.max_error()
            );
            if !report.passed() {
                return Err(RunError::CheckFailed(format!("{} of {} cases failed", report.failures(), report.cases.len())));
            }
        }
        Cmd::DumpDecisions {
            cfg,
            checkpoint,
            split,
            limit,
            out,
        } => {
            let cfg = cfg.load()?;
            let split: Split = split.parse()?;
            let ds = Dataset::load(&cfg)?;
            let policy = eval_policy(&cfg, &ds)?;
            let model = trainer::load_model::<f32>(&cfg, &checkpoint_or(&cfg, checkpoint))?;
            let samples = ds.split(split);
            let samples = &samples[..limit.unwrap_or(samples.len()).min(samples.len())];
            let rows = decisions::dump_decisions(&model, samples, &policy, cfg.eval_batch_size, &out)?;
            println!("wrote {rows} rows to {}", out.display());
        }
        Cmd::DatasetStats { cfg, out } => {
            let cfg = cfg.load()?;
            let ds = Dataset::load(&cfg)?;
            let stats = dpn_core::data::channel_stats(&ds.train)?;
            match out {
                Some(p) => {
                    dataset::write_stats(&p, &stats)?;
                    println!("wrote {}", p.display());
                }
                None => println!("{}", dataset::stats_json(&stats)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
