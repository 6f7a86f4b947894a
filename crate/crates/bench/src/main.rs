use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use cama_bench::config::{ExperimentConfig, ExperimentKind, Manipulation};
use cama_bench::run::{run, RunOptions};
use cama_core::datagen::{generate_measurement, shift_children, shift_coparents};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cama", version, about = "CAMA robustness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a measurement dataset (optionally shifted) as CSV.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Add this to every co-parent, regenerating the children.
        #[arg(long, conflicts_with = "shift_children")]
        shift_coparents: Option<f64>,
        /// Add this to every child.
        #[arg(long)]
        shift_children: Option<f64>,
    },
    /// Train every model of a config and write checkpoints.
    Train(Common),
    /// Evaluate on the manipulation grid without fine-tuning.
    Eval(Common),
    /// Evaluate, fine-tune CAMA on the manipulated test data, evaluate again.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Fraction of the manipulated test set used.
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// White-box attack sweep.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "fgsm")]
        method: AttackMethod,
        /// Comma-separated epsilons; overrides the grid.
        #[arg(long, value_delimiter = ',', required = true)]
        epsilons: Vec<f64>,
    },
    /// Full experiment as configured.
    Sweep(Common),
    /// Aggregate result CSVs into plot data.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackMethod {
    Fgsm,
    Pgd,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Run seeds; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', required = true)]
    seed: Vec<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Directory of checkpoints from an earlier run, used instead of training.
    #[arg(long)]
    load: Option<PathBuf>,
    /// Comma-separated magnitudes; overrides the grid.
    #[arg(long, value_delimiter = ',')]
    magnitudes: Option<Vec<f64>>,
    /// `z` samples per class at prediction time.
    #[arg(long)]
    k: Option<usize>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?.with_seeds(&self.seed);
        if let Some(m) = &self.magnitudes {
            cfg.grid.magnitudes = m.clone();
        }
        if self.k.is_some() {
            cfg.weights.k = self.k;
        }
        if self.load.is_some() {
            cfg.train.load_dir = self.load.clone();
        }
        Ok(cfg)
    }
}

fn execute(cfg: &ExperimentConfig, common: &Common, opts: RunOptions) -> Result<()> {
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let out = run(cfg, &common.out, opts)?;
    println!("{} rows -> {}", out.rows.len(), out.csv_path.display());
    println!("manifest -> {}", out.manifest_path.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            seed,
            out,
            shift_coparents: sc,
            shift_children: sx,
        } => {
            let (mut ds, mech) = generate_measurement(seed);
            if let Some(d) = sc {
                ds = shift_coparents(&ds, &mech, d)?;
            }
            if let Some(d) = sx {
                ds = shift_children(&ds, d)?;
            }
            ds.write_csv(std::fs::File::create(&out)?)?;
            println!("{} rows -> {}", ds.rows(), out.display());
        }
        Command::Train(common) => execute(&common.config()?, &common, RunOptions { train_only: true })?,
        Command::Eval(common) => {
            let mut cfg = common.config()?;
            cfg.finetune.enabled = Some(false);
            execute(&cfg, &common, RunOptions::default())?
        }
        Command::Finetune {
            common,
            fraction,
            steps,
        } => {
            let mut cfg = common.config()?;
            cfg.finetune.enabled = Some(true);
            if fraction.is_some() {
                cfg.finetune.fraction = fraction;
                cfg.finetune.fractions = fraction.map(|f| vec![f]);
            }
            if steps.is_some() {
                cfg.finetune.steps = steps;
            }
            execute(&cfg, &common, RunOptions::default())?
        }
        Command::Attack {
            common,
            method,
            epsilons,
        } => {
            let mut cfg = common.config()?;
            cfg.kind = ExperimentKind::AttackSweep;
            cfg.relabel = None;
            cfg.grid.manipulation = match method {
                AttackMethod::Fgsm => Manipulation::Fgsm,
                AttackMethod::Pgd => Manipulation::Pgd,
            };
            cfg.grid.magnitudes = epsilons;
            execute(&cfg, &common, RunOptions::default())?
        }
        Command::Sweep(common) => execute(&common.config()?, &common, RunOptions::default())?,
        Command::Report { out, csv } => {
            let written = cama_bench::report::report(&csv, &out)?;
            if written.is_empty() {
                bail!("no experiments found in the given files");
            }
            for p in written {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
