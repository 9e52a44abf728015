mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wlasdi::experiment::ExperimentConfig;
use wlasdi::optimize::OptimizerKind;
use wlasdi::DynamicsForm;

#[derive(Debug, Parser)]
#[command(name = "wlasdi", version, about = "Weak-form latent-dynamics surrogates for PDE-constrained optimization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Experiment configuration (JSON); built-in Burgers benchmark when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the configuration's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Replaces the configured seed list (noise and differential evolution).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the full-order model at one parameter.
    FomRun {
        /// Parameter vector, comma separated; the configured target when absent.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Option<Vec<f64>>,
    },
    /// Train a surrogate on the configured training design and save it.
    Train {
        #[arg(long, value_enum, default_value_t = MethodArg::Wlasdi)]
        method: MethodArg,
        /// Noise ratio applied to the training snapshots.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
    /// Decode the surrogate trajectory at one parameter.
    Predict {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        mu: Vec<f64>,
    },
    /// Recover the configured target parameter with a saved surrogate.
    Optimize {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OptimizerArg::Bfgs)]
        optimizer: OptimizerArg,
    },
    /// Run the noise × method × optimizer report matrix.
    Bench,
    /// Compare adjoint, direct, and finite-difference gradients.
    Gradcheck {
        /// Saved surrogate; one is trained from the configuration when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Evaluation point; the configured optimizer start when absent.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1e-6)]
        fd_step: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MethodArg {
    Wlasdi,
    Lasdi,
}

impl MethodArg {
    fn form(self) -> DynamicsForm {
        match self {
            MethodArg::Wlasdi => DynamicsForm::Weak,
            MethodArg::Lasdi => DynamicsForm::Strong,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OptimizerArg {
    Bfgs,
    NelderMead,
    De,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Bfgs => OptimizerKind::Bfgs,
            OptimizerArg::NelderMead => OptimizerKind::NelderMead,
            OptimizerArg::De => OptimizerKind::DifferentialEvolution,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(wlasdi::Error),
}

impl From<wlasdi::Error> for CliError {
    fn from(e: wlasdi::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

fn load_config(g: &Global) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.seeds = vec![seed];
        cfg.optimizer_settings.de.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::FomRun { mu } => commands::fom_run(&cfg, mu),
        Command::Train { method, noise } => commands::train(&cfg, method, noise),
        Command::Predict { model, mu } => commands::predict(&cfg, model, mu),
        Command::Optimize { model, optimizer } => commands::optimize(&cfg, model, optimizer.into()),
        Command::Bench => commands::bench(&cfg),
        Command::Gradcheck { model, mu, fd_step } => commands::gradcheck(&cfg, model, mu, fd_step),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Usage("x".into()).exit_code(), 1);
        assert_eq!(CliError::Core(wlasdi::Error::Config("x".into())).exit_code(), 1);
        assert_eq!(CliError::Core(wlasdi::Error::BlowUp { step: 3, norm: 1e9 }).exit_code(), 2);
        assert_eq!(CliError::Core(wlasdi::Error::Singular("x".into())).exit_code(), 2);
    }

    #[test]
    fn global_flags_override_config() {
        let cli = Cli::try_parse_from(["wlasdi", "--out", "elsewhere", "--seed", "7", "bench"]).unwrap();
        let cfg = load_config(&cli.global).unwrap();
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.optimizer_settings.de.seed, 7);
    }

    #[test]
    fn parameter_lists_parse_with_commas() {
        let cli = Cli::try_parse_from(["wlasdi", "predict", "--mu", "0.8,1,0.8,1"]).unwrap();
        match cli.command {
            Command::Predict { mu, .. } => assert_eq!(mu, vec![0.8, 1.0, 0.8, 1.0]),
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["wlasdi", "predict"]).is_err());
    }
}
