use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use genhmm_cli::commands::{cmd_bench, cmd_eval, cmd_synth, cmd_train, parse_grid};
use genhmm_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "genhmm", version, about = "Train and evaluate flow-emission HMM sequence classifiers")]
struct Cli {
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per class and write checkpoints to --out.
    Train {
        #[command(flatten)]
        flags: Flags,
        /// Continue from the checkpoints already in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Classify a labelled dataset with trained checkpoints.
    Eval {
        #[command(flatten)]
        flags: Flags,
    },
    /// Sweep a configuration grid, training and evaluating each cell.
    Bench {
        #[command(flatten)]
        flags: Flags,
        /// Grid as `key=v1,v2;key2=v3`, e.g. `model=genhmm,gmmhmm;k=1,3`.
        #[arg(long, default_value = "")]
        grid: String,
    },
    /// Write the train/test splits of a synthetic preset into --out.
    Synth {
        #[command(flatten)]
        flags: Flags,
    },
}

/// Overrides for configuration keys; see the README for defaults.
#[derive(Args, Default)]
struct Flags {
    #[arg(long, value_parser = ["genhmm", "gmmhmm"])]
    model: Option<String>,
    /// Mixture components per state.
    #[arg(long)]
    k: Option<String>,
    /// Flow blocks (pairs of coupling layers) per generator.
    #[arg(long)]
    blocks: Option<String>,
    /// Hidden width of the coupling networks.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    net_layers: Option<String>,
    /// HMM states per class, or `auto`.
    #[arg(long)]
    states: Option<String>,
    /// Divisor turning mean sequence length into a state count.
    #[arg(long)]
    frames_per_state: Option<String>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<String>,
    /// Sequences per gradient batch (0 = all).
    #[arg(long)]
    batch_size: Option<String>,
    /// Gradient batches per EM iteration.
    #[arg(long)]
    inner_batches: Option<String>,
    /// Maximum EM iterations.
    #[arg(long)]
    max_em: Option<String>,
    /// Relative log-likelihood change that stops EM.
    #[arg(long)]
    tol: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    guard: Option<String>,
    #[arg(long)]
    standardize: Option<String>,
    /// Test-time noise.
    #[arg(long, value_parser = ["none", "white", "pink"])]
    noise: Option<String>,
    /// Per-sequence SNR of the test-time noise.
    #[arg(long, allow_hyphen_values = true)]
    snr_db: Option<String>,
    /// Score by log-likelihood per frame rather than per sequence.
    #[arg(long)]
    per_frame: Option<String>,
    /// Worker threads (0 = one per core).
    #[arg(long)]
    threads: Option<String>,
    /// Training dataset (eval: test dataset if --test is absent).
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    test: Option<String>,
    /// Directory of checkpoints to evaluate.
    #[arg(long)]
    models: Option<String>,
    /// train: checkpoint directory; eval: report file; bench: report directory.
    #[arg(long)]
    out: Option<String>,
    /// Synthetic benchmark: separated, warped or multimodal.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    train_per_class: Option<String>,
    #[arg(long)]
    test_per_class: Option<String>,
    #[arg(long)]
    min_len: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("model", &self.model),
            ("k", &self.k),
            ("blocks", &self.blocks),
            ("hidden", &self.hidden),
            ("net-layers", &self.net_layers),
            ("states", &self.states),
            ("frames-per-state", &self.frames_per_state),
            ("lr", &self.lr),
            ("batch-size", &self.batch_size),
            ("inner-batches", &self.inner_batches),
            ("max-em", &self.max_em),
            ("tol", &self.tol),
            ("seed", &self.seed),
            ("guard", &self.guard),
            ("standardize", &self.standardize),
            ("noise", &self.noise),
            ("snr-db", &self.snr_db),
            ("per-frame", &self.per_frame),
            ("threads", &self.threads),
            ("data", &self.data),
            ("test", &self.test),
            ("models", &self.models),
            ("out", &self.out),
            ("preset", &self.preset),
            ("train-per-class", &self.train_per_class),
            ("test-per-class", &self.test_per_class),
            ("min-len", &self.min_len),
            ("max-len", &self.max_len),
        ]
    }
}

fn build_config(file: Option<&PathBuf>, flags: &Flags) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = file {
        cfg.apply_file(path)?;
    }
    for (key, value) in flags.pairs() {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { flags, resume } => {
            let cfg = build_config(cli.config.as_ref(), flags)?;
            println!("# config hash {}\n{}", cfg.hash(), cfg.to_text());
            let models = cmd_train(&cfg, *resume)?;
            println!("trained {} class models into {}", models.models.len(), cfg.get("out"));
        }
        Command::Eval { flags } => {
            let cfg = build_config(cli.config.as_ref(), flags)?;
            let report = cmd_eval(&cfg)?;
            print!("{}", report.to_table());
            if cfg.out.is_none() {
                print!("{}", report.to_kv());
            }
        }
        Command::Bench { flags, grid } => {
            let cfg = build_config(cli.config.as_ref(), flags)?;
            let axes = parse_grid(grid)?;
            let report = cmd_bench(&cfg, &axes)?;
            print!("{}", report.to_table());
            if let Some(e) = report.first_error() {
                return Err(e.reported());
            }
        }
        Command::Synth { flags } => {
            let cfg = build_config(cli.config.as_ref(), flags)?;
            let (train, test) = cmd_synth(&cfg)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
