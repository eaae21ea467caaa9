use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lunet::experiment::{
    cmd_diagnose, cmd_eval, cmd_interpolate, cmd_sample, cmd_train, image_shape, CliError, DataArgs,
    ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "lunet",
    version,
    about = "Train and inspect LU-factorized invertible networks"
)]
struct Cli {
    /// Worker threads for batch-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct DataSource {
    /// Experiment config whose data section provides the test split.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Headered CSV with one vector per row.
    #[arg(long)]
    data_csv: Option<PathBuf>,
}

impl DataSource {
    fn resolve(&self) -> Result<DataArgs, CliError> {
        match (&self.config, &self.data_csv) {
            (Some(cfg), _) => Ok(DataArgs::Config(Box::new(ExperimentConfig::load(cfg)?))),
            (None, Some(csv)) => Ok(DataArgs::Csv(csv.clone())),
            (None, None) => Err(CliError::Config(
                "one of --config or --data-csv is required".into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the model and training seeds.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the test negative log-likelihood of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataSource,
        /// Also report bits per pixel.
        #[arg(long)]
        bits_per_pixel: bool,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw samples through the inverse network.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short = 'n', default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write PGM images instead of CSV.
        #[arg(long)]
        image: bool,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interpolate between two test items in latent space.
    Interpolate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataSource,
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Condition numbers and projection normality tests.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataSource,
        /// First direction seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of random directions.
        #[arg(long, default_value_t = 10)]
        directions: u64,
        #[arg(long, default_value_t = 30)]
        bins: usize,
        /// Second checkpoint to compare KS statistics against.
        #[arg(long)]
        compare: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn default_out(out: Option<PathBuf>, checkpoint: &Path) -> PathBuf {
    out.unwrap_or_else(|| {
        checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let stdout = io::stdout();
    let mut log = stdout.lock();
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            cfg.apply_overrides(seed, out);
            let summary = cmd_train(cfg, &mut log)?;
            writeln!(log, "run directory: {}", summary.run_dir.display()).ok();
        }
        Command::Eval {
            checkpoint,
            data,
            bits_per_pixel,
            out,
        } => {
            let out = default_out(out, &checkpoint);
            cmd_eval(&checkpoint, &data.resolve()?, bits_per_pixel, &out, &mut log)?;
        }
        Command::Sample {
            checkpoint,
            n,
            seed,
            image,
            rows,
            cols,
            out,
        } => {
            let out = default_out(out, &checkpoint);
            let shape = if image {
                let dim = lunet::model::load_checkpoint(&checkpoint)
                    .map_err(|e| CliError::Data(format!("{}: {e}", checkpoint.display())))?
                    .net
                    .dim();
                Some(image_shape(dim, rows, cols)?)
            } else {
                None
            };
            cmd_sample(&checkpoint, n, seed, shape, &out, &mut log)?;
        }
        Command::Interpolate {
            checkpoint,
            data,
            a,
            b,
            steps,
            out,
        } => {
            let out = default_out(out, &checkpoint);
            cmd_interpolate(&checkpoint, &data.resolve()?, a, b, steps, &out, &mut log)?;
        }
        Command::Diagnose {
            checkpoint,
            data,
            seed,
            directions,
            bins,
            compare,
            out,
        } => {
            let out = default_out(out, &checkpoint);
            let seeds: Vec<u64> = (seed..seed.saturating_add(directions)).collect();
            cmd_diagnose(
                &checkpoint,
                &data.resolve()?,
                &seeds,
                bins,
                compare.as_deref(),
                &out,
                &mut log,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lunet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
