use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "fdnet", version, about = "Fully dense encoder-decoder segmentation toolkit")]
struct Cli {
    /// Upper bound on concurrent worker contexts.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic shapes dataset directory.
    Gen {
        /// JSON synthetic-data spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the spec's sample count.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Train a network; writes checkpoint.fdckpt and train_log.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.max_iter.
        #[arg(long)]
        max_iter: Option<usize>,
    },
    /// Evaluate a checkpoint (or stored predictions) on a dataset directory.
    Eval {
        #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `ID.pgm` label rasters to score instead of running a network.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// `lo:hi:step` or a comma-separated list.
        #[arg(long, default_value = "1.0")]
        scales: String,
        #[arg(long)]
        flip: bool,
        /// Trimap band widths.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10, 20, 40])]
        trimap: Vec<usize>,
        /// Write the metrics JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict a label raster for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1.0")]
        scales: String,
        #[arg(long)]
        flip: bool,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// `all` or comma-separated op names.
        #[arg(long, default_value = "all")]
        ops: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Render the boundary band partition of a label raster.
    Bands {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        kernels: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 255)]
        ignore: u8,
    },
    /// Print the parameter count and aggregation connectivity of a configured network.
    Inspect {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            if e.is_config_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
