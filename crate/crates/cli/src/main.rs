mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "qfat", version, about = "Mixture-density transformer policies: data, training, evaluation and sampling tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Root seed; every random stream derives from it.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (results do not depend on this).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq)]
pub enum EnvArg {
    Multiroute,
    Sequencing,
}

#[derive(Copy, Clone, Debug, ValueEnum, PartialEq, Eq)]
pub enum SamplerArg {
    Vanilla,
    Scaled,
    Mode,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a JSON-lines demonstration dataset.
    GenData {
        #[arg(long, value_enum)]
        env: EnvArg,
        #[arg(long)]
        n: usize,
        /// Standard deviation of the demonstrator's action noise.
        #[arg(long, default_value_t = 0.01)]
        noise_std: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy; writes checkpoints, the CSV log and a summary.
    Train {
        /// JSON with "policy" and "train" sections.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Roll a checkpoint out in an environment.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        env: EnvArg,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Condition on goal windows from reference demonstrations.
        #[arg(long)]
        conditional: bool,
        /// Reference demonstrations for --conditional.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        process_noise: f64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Find the modes of a mixture given as JSON.
    Modes {
        #[arg(long)]
        config: PathBuf,
        /// Output JSON file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Draw samples from a mixture under every sampler.
    SampleViz {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1e-6)]
        alpha: f64,
        /// none, fixed[:sd] or laplace[:temperature]
        #[arg(long, default_value = "none")]
        mode_noise: String,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Time backbone forward, head decode and each sampler.
    Bench {
        /// Policy config JSON; the 6-layer/128-wide shape when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        /// Output JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args, Debug, Clone)]
pub struct SamplerFlags {
    #[arg(long, value_enum, default_value = "vanilla")]
    pub sampler: SamplerArg,
    /// Variance scale for --sampler scaled.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// none, fixed[:sd] or laplace[:temperature], for --sampler mode.
    #[arg(long)]
    pub mode_noise: Option<String>,
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
    let result = match cli.command {
        Command::GenData { env, n, noise_std, out, common } => commands::gen_data(env, n, noise_std, &out, &common),
        Command::Train { config, dataset, out, common } => commands::train(&config, &dataset, &out, &common),
        Command::Eval { checkpoint, env, episodes, sampler, conditional, dataset, process_noise, out, common } => {
            commands::eval(commands::EvalArgs {
                checkpoint: &checkpoint,
                env,
                episodes,
                sampler: &sampler,
                conditional,
                dataset: dataset.as_deref(),
                process_noise,
                out: &out,
                common: &common,
            })
        }
        Command::Modes { config, out, common } => commands::modes(&config, out.as_deref(), &common),
        Command::SampleViz { config, n, alpha, mode_noise, out, common } => {
            commands::sample_viz(&config, n, alpha, &mode_noise, &out, &common)
        }
        Command::Bench { config, reps, out, common } => commands::bench(config.as_deref(), reps, out.as_deref(), &common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
