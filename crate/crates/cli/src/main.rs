use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use recloop_cli::commands::{self, FixtureOverrides};
use recloop_cli::config::ConfigError;

#[derive(Parser)]
#[command(
    name = "recloop",
    about = "Closed-loop policy training against a BM25 retrieval environment",
    version
)]
struct Cli {
    /// Log level (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build an inverted-index snapshot and print collection stats.
    Index {
        /// Documents file (one JSON object per line).
        #[arg(long)]
        corpus: PathBuf,
        /// Where to write the snapshot.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy according to a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the config's test split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run a verification suite: bm25, metrics, gradients, fact1, theorem2,
    /// theorem3, or all.
    Verify {
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic fixture (product_search, rerank, seq_rec).
    Fixture {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        eval: Option<usize>,
        #[arg(long)]
        states: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
    },
    /// Serve retrieval and reward over HTTP.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        addr: SocketAddr,
    },
}

/// Exit codes: 0 success, 1 runtime failure, 2 usage or config error
/// (clap's own parse errors also exit with 2).
fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .init();

    let result: anyhow::Result<bool> = match cli.command {
        Command::Index { corpus, out } => commands::cmd_index(&corpus, &out).map(|_| true),
        Command::Train { config, seed, out } => {
            commands::cmd_train(&config, seed, out).map(|_| true)
        }
        Command::Eval { config, checkpoint } => {
            commands::cmd_eval(&config, &checkpoint).map(|_| true)
        }
        Command::Verify { suite, seed } => commands::cmd_verify(&suite, seed),
        Command::Fixture {
            kind,
            out,
            seed,
            docs,
            vocab,
            train,
            eval,
            states,
            m,
        } => {
            let overrides = FixtureOverrides {
                docs,
                vocab,
                train,
                eval,
                states,
                m,
            };
            commands::cmd_fixture(&kind, &out, seed, &overrides).map(|_| true)
        }
        Command::Serve { config, addr } => commands::cmd_serve(&config, addr).map(|_| true),
    };

    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            let usage_class = err.downcast_ref::<ConfigError>().is_some()
                || err.to_string().contains("unknown suite")
                || err.to_string().contains("unknown fixture kind");
            if usage_class {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
