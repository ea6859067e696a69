//! `augerino` command line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use augerino_core::checkpoint;
use augerino_core::data;
use augerino_core::experiment::{
    default_scan_grid, evaluate, fmt17, rays_csv, scan_csv, scan_range, scan_rays,
    sub_seed, train_on, trajectories, trajectories_csv, ExperimentConfig, ExperimentError,
};

#[derive(Parser)]
#[command(name = "augerino", about = "Train and probe learned augmentation distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the regularizer strength.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides the test-time augmentation copy count.
    #[arg(long)]
    ncopies: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv and model.ckpt.
    Train(Common),
    /// Evaluate a checkpoint; writes eval.csv with the sensitivity curve.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint produced by `train`.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Expected loss vs one generator width; writes scan.csv.
    ScanRange {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Generator index to scan (0-based; 2 = rotation).
        #[arg(long, default_value_t = 2)]
        axis: usize,
    },
    /// Width trajectories from several inits; writes traj.csv.
    Trajectories {
        #[command(flatten)]
        common: Common,
        /// Comma-separated initial widths (narrow, correct, wide).
        #[arg(long, default_value = "0.05,0.7853981633974483,1.2", value_delimiter = ',')]
        inits: Vec<f64>,
    },
    /// Loss/error along random weight-space rays; writes rays.csv.
    ScanRays {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        rays: usize,
        /// Comma-separated radii.
        #[arg(long, default_value = "0,0.5,1,2,4", value_delimiter = ',')]
        radii: Vec<f64>,
    },
    /// Generate the train/test datasets; writes train.aug and test.aug.
    GenData(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(l) = common.lambda {
        cfg.lambda = l;
    }
    if let Some(n) = common.ncopies {
        cfg.n_copies_test = n;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out).map_err(ExperimentError::Io)?;
            let train_ds = cfg.train_dataset();
            let out = train_on(&cfg, &train_ds)?;
            std::fs::write(common.out.join("metrics.csv"), out.epoch_csv())
                .map_err(ExperimentError::Io)?;
            checkpoint::save(&out.model, &common.out.join("model.ckpt"))?;
            let last = out.history.last().expect("epochs >= 1");
            println!("train loss {} metric {}", fmt17(last.loss), fmt17(last.metric));
            for (i, w) in out.model.widths().iter().enumerate() {
                println!("theta_{} {}", i + 1, fmt17(*w));
            }
            Ok(())
        }
        Command::Eval { common, ckpt } => {
            let cfg = load_config(&common)?;
            let model = checkpoint::load(&ckpt)?;
            std::fs::create_dir_all(&common.out).map_err(ExperimentError::Io)?;
            let ds = cfg.test_dataset();
            let out = evaluate(&model, &ds, cfg.n_copies_test, sub_seed(cfg.seed, 5))?;
            std::fs::write(common.out.join("eval.csv"), out.csv()).map_err(ExperimentError::Io)?;
            println!("eval metric {}", fmt17(out.metric));
            Ok(())
        }
        Command::ScanRange { common, ckpt, axis } => {
            let cfg = load_config(&common)?;
            let model = checkpoint::load(&ckpt)?;
            if axis >= model.basis.len() {
                return Err(CliError::Config(format!(
                    "axis {axis} out of range for a {}-generator basis",
                    model.basis.len()
                )));
            }
            std::fs::create_dir_all(&common.out).map_err(ExperimentError::Io)?;
            let ds = cfg.train_dataset();
            let rows = scan_range(
                &model,
                &ds,
                axis,
                &default_scan_grid(),
                cfg.lambda,
                cfg.mc_budget,
                sub_seed(cfg.seed, 6),
            )?;
            std::fs::write(common.out.join("scan.csv"), scan_csv(&rows))
                .map_err(ExperimentError::Io)?;
            println!("scan rows {}", rows.len());
            Ok(())
        }
        Command::Trajectories { common, inits } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out).map_err(ExperimentError::Io)?;
            let (points, finals) = trajectories(&cfg, &inits)?;
            std::fs::write(common.out.join("traj.csv"), trajectories_csv(&points))
                .map_err(ExperimentError::Io)?;
            for (init, fin) in inits.iter().zip(&finals) {
                println!("init {} final {}", fmt17(*init), fmt17(*fin));
            }
            Ok(())
        }
        Command::ScanRays {
            common,
            ckpt,
            rays,
            radii,
        } => {
            let cfg = load_config(&common)?;
            let model = checkpoint::load(&ckpt)?;
            std::fs::create_dir_all(&common.out).map_err(ExperimentError::Io)?;
            let train_ds = cfg.train_dataset();
            let test_ds = cfg.test_dataset();
            let rows = scan_rays(&model, &train_ds, &test_ds, rays, &radii, sub_seed(cfg.seed, 9))?;
            std::fs::write(common.out.join("rays.csv"), rays_csv(&rows))
                .map_err(ExperimentError::Io)?;
            println!("ray rows {}", rows.len());
            Ok(())
        }
        Command::GenData(common) => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out).map_err(ExperimentError::Io)?;
            let train_ds = cfg.train_dataset();
            let test_ds = cfg.test_dataset();
            data::save(&train_ds, &common.out.join("train.aug"))?;
            data::save(&test_ds, &common.out.join("test.aug"))?;
            println!("wrote {} train and {} test examples", train_ds.len(), test_ds.len());
            Ok(())
        }
    }
}

enum CliError {
    Config(String),
    Numeric(String),
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(c) => CliError::Config(c.to_string()),
            ExperimentError::Io(io) => CliError::Config(io.to_string()),
            ExperimentError::Data(d) => CliError::Config(d.to_string()),
            ExperimentError::Numeric { .. } | ExperimentError::Tensor(_) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<augerino_core::checkpoint::CheckpointError> for CliError {
    fn from(e: augerino_core::checkpoint::CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<augerino_core::data::DataError> for CliError {
    fn from(e: augerino_core::data::DataError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
