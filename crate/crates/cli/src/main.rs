use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod manifest;
mod model_file;
mod tables;

use config::{Config, Overrides};
use error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "spectral",
    version,
    about = "Teacher-student experiments with spectrally parametrized dense layers"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration file; flags below override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed for the teacher, the datasets and the students.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// First hidden widths of the students, comma separated.
    #[arg(long = "h", global = true, value_name = "LIST", value_delimiter = ',')]
    h: Option<Vec<usize>>,

    /// Trials per width and parametrization.
    #[arg(long, global = true, value_name = "N")]
    trials: Option<usize>,

    /// Maximum concurrent trials (0 = all cores).
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,

    /// Normalized relevance threshold for core-size estimation.
    #[arg(long, global = true, value_name = "R")]
    tau: Option<f64>,

    /// Training epochs.
    #[arg(long, global = true, value_name = "N")]
    epochs: Option<usize>,

    /// L2 penalty on the trained output eigenvalues.
    #[arg(long, global = true, value_name = "R")]
    alpha_lambda: Option<f64>,

    /// L2 penalty on the eigenvector entries.
    #[arg(long, global = true, value_name = "R")]
    alpha_phi: Option<f64>,

    /// L2 penalty on dense weights.
    #[arg(long, global = true, value_name = "R")]
    alpha_w: Option<f64>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the frozen teacher network and save it.
    GenTeacher,

    /// Train standard and spectral students over the width grid.
    Sweep,

    /// Remove first-layer nodes by ascending relevance and record the test error.
    Prune {
        /// Model file to prune; repeatable.
        #[arg(long, required = true, value_name = "PATH")]
        model: Vec<PathBuf>,

        /// Teacher whose held-out set is used; generated from the config when absent.
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,

        /// Also save each model pruned to its estimated core under `pruned/`.
        #[arg(long)]
        write_pruned: bool,
    },

    /// Compare the sorted path-magnitude spectra of two models.
    Paths {
        model_a: PathBuf,
        model_b: PathBuf,

        /// Prune model A to its estimated core first.
        #[arg(long)]
        prune_a: bool,

        /// Prune model B to its estimated core first.
        #[arg(long)]
        prune_b: bool,
    },

    /// Compare analytic gradients with central finite differences.
    GradCheck {
        /// Perturb one analytic gradient entry before comparing (negative control).
        #[arg(long, hide = true)]
        corrupt: bool,
    },

    /// Check the linear and spectral forms of a 2-D convolution against a direct one.
    ConvDemo {
        /// Stride of the displayed case.
        #[arg(long, value_name = "N")]
        stride: Option<usize>,

        /// Zero padding of the displayed case.
        #[arg(long, value_name = "N")]
        pad: Option<usize>,

        /// Relevance applied in the scaled-filter form.
        #[arg(long, value_name = "R")]
        relevance: Option<f64>,

        /// Number of randomized specs.
        #[arg(long, value_name = "N")]
        cases: Option<usize>,

        /// Write the displayed case's Toeplitz matrix to `toeplitz.csv`.
        #[arg(long)]
        toeplitz_csv: bool,
    },
}

impl GlobalArgs {
    fn config(&self) -> CliResult<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            h: self.h.clone(),
            trials: self.trials,
            parallel: self.parallel,
            tau: self.tau,
            epochs: self.epochs,
            alpha_lambda: self.alpha_lambda,
            alpha_phi: self.alpha_phi,
            alpha_w: self.alpha_w,
        });
        Ok(cfg)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = cli.global.config()?;
    let out = &cli.global.out;
    match cli.command {
        Command::GenTeacher => commands::gen_teacher(&cfg, out),
        Command::Sweep => commands::sweep(&cfg, out),
        Command::Prune {
            model,
            teacher,
            write_pruned,
        } => commands::prune(&cfg, out, &model, teacher.as_deref(), write_pruned),
        Command::Paths {
            model_a,
            model_b,
            prune_a,
            prune_b,
        } => commands::paths(&cfg, out, &model_a, &model_b, prune_a, prune_b),
        Command::GradCheck { corrupt } => commands::grad_check(&cfg, out, corrupt),
        Command::ConvDemo {
            stride,
            pad,
            relevance,
            cases,
            toeplitz_csv,
        } => {
            if let Some(v) = stride {
                cfg.conv.stride = v;
            }
            if let Some(v) = pad {
                cfg.conv.pad = v;
            }
            if let Some(v) = relevance {
                cfg.conv.relevance = v;
            }
            if let Some(v) = cases {
                cfg.conv.cases = v;
            }
            commands::conv_demo(&cfg, out, toeplitz_csv)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
