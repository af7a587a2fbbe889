//! Command-line front end: synthetic data, training, evaluation, gradient
//! checks, invariant verification and benchmarks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use hyperpoint::bench::{bench_csv, run_bench};
use hyperpoint::checkpoint::load_checkpoint;
use hyperpoint::config::RunConfig;
use hyperpoint::data::{load_sequence, save_sequence, synth_dataset, LabeledSequence, Split};
use hyperpoint::gradsuite::{run_gradcheck, worst, Scope};
use hyperpoint::model::Model;
use hyperpoint::train::{evaluate, metrics_csv, train, EpochMetrics, PreparedSet};
use hyperpoint::verify::run_all;
use hyperpoint::{Error, Result};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "hyperpoint", version, about = "Point-cloud sequence action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML, `version = 1`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the step being run
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset as sequence files under OUT/train and OUT/test
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.csv, model.ckpt and config.toml to OUT
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Dataset directory written by `synth`; generated in memory when absent
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained model on the test split; writes OUT/eval.csv
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference gradient checks
    Gradcheck {
        #[arg(long, default_value = "all")]
        scope: Scope,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Run every invariant suite
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Kernel throughput as CSV on stdout (and OUT/bench.csv when given)
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time budget per kernel
        #[arg(long, default_value_t = 1.0)]
        seconds: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_split(dir: &Path) -> Result<Vec<LabeledSequence>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pcsq"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Config(format!("no .pcsq files in {}", dir.display())));
    }
    files.iter().map(|p| load_sequence(p)).collect()
}

fn dataset(cfg: &RunConfig, data: Option<&Path>, split: Split) -> Result<Vec<LabeledSequence>> {
    match data {
        Some(dir) => load_split(&dir.join(match split {
            Split::Train => "train",
            Split::Test => "test",
        })),
        None => synth_dataset(&cfg.synth, split),
    }
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Synth { common, out } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.synth.seed = s;
            }
            for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
                let dir = out.join(name);
                create_dir(&dir)?;
                let samples = synth_dataset(&cfg.synth, split)?;
                for (i, s) in samples.iter().enumerate() {
                    save_sequence(&dir.join(format!("{i:05}.pcsq")), &s.sequence, s.label)?;
                }
                println!("{name}: {} sequences", samples.len());
            }
            Ok(true)
        }
        Command::Train {
            common,
            out,
            epochs,
            batch_size,
            data,
        } => {
            let mut cfg = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            create_dir(&out)?;
            let ckpt = out.join("model.ckpt");
            cfg.train.checkpoint = Some(ckpt);
            cfg.validate()?;
            write(&out.join("config.toml"), &cfg.to_toml()?)?;
            let train_data = dataset(&cfg, data.as_deref(), Split::Train)?;
            let test_data = dataset(&cfg, data.as_deref(), Split::Test)?;
            let train_set = PreparedSet::new(&cfg.model, &train_data)?;
            let test_set = PreparedSet::new(&cfg.model, &test_data)?;
            let mut rows_so_far: Vec<EpochMetrics> = Vec::new();
            let metrics_path = out.join("metrics.csv");
            let mut hook = |_: &Model, rows: &[EpochMetrics]| {
                for r in rows {
                    println!("epoch {:>3} {:<5} loss {:.4} accuracy {:.4}", r.epoch, r.split, r.loss, r.accuracy);
                }
                rows_so_far.extend_from_slice(rows);
                write(&metrics_path, &metrics_csv(&rows_so_far)).is_ok()
            };
            let (_, metrics) = train(&cfg.model, &cfg.train, &train_set, Some(&test_set), Some(&mut hook))?;
            write(&metrics_path, &metrics_csv(&metrics))?;
            Ok(true)
        }
        Command::Eval {
            common,
            out,
            checkpoint,
            data,
        } => {
            let cfg = match common.config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::load(&out.join("config.toml"))?,
            };
            let ckpt = checkpoint.unwrap_or_else(|| out.join("model.ckpt"));
            let params = load_checkpoint(&ckpt, &cfg.model)?;
            let model = Model {
                config: cfg.model.clone(),
                params,
            };
            let test_data = dataset(&cfg, data.as_deref(), Split::Test)?;
            let test_set = PreparedSet::new(&cfg.model, &test_data)?;
            let report = evaluate(&model, &test_set)?;
            let row = EpochMetrics {
                epoch: 0,
                split: "test",
                loss: report.loss,
                accuracy: report.accuracy,
            };
            create_dir(&out)?;
            write(&out.join("eval.csv"), &metrics_csv(&[row]))?;
            println!("test loss {:.4} accuracy {:.4}", report.loss, report.accuracy);
            for (c, counts) in report.confusion.iter().enumerate() {
                println!("class {c}: {counts:?}");
            }
            Ok(true)
        }
        Command::Gradcheck { scope, seed, eps } => {
            let reports = run_gradcheck(scope, eps, seed)?;
            for r in &reports {
                println!("{:<7} {:<24} checked {:>5}  max rel. error {:.3e}", r.scope, r.name, r.checked, r.max_rel_error);
            }
            let w = worst(&reports);
            println!("max rel. error {w:.3e}");
            Ok(w < GRADCHECK_TOLERANCE)
        }
        Command::Verify { seed } => {
            let checks = run_all(seed)?;
            let mut ok = true;
            for c in &checks {
                println!("{} {}::{} {}", if c.passed { "PASS" } else { "FAIL" }, c.suite, c.name, c.detail);
                ok &= c.passed;
            }
            Ok(ok)
        }
        Command::Bench { common, out, seconds } => {
            let cfg = load_config(common.config.as_deref())?;
            if !(seconds > 0.0) || !seconds.is_finite() {
                return Err(Error::Config(format!("bench budget must be positive, got {seconds}")));
            }
            let rows = run_bench(&cfg.model, Duration::from_secs_f64(seconds), common.seed.unwrap_or(1))?;
            let csv = bench_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                create_dir(&dir)?;
                write(&dir.join("bench.csv"), &csv)?;
            }
            Ok(true)
        }
    }
}
