//! `atlas`: measure, attest, log and verify ML pipeline artifacts.
//!
//! Exit codes: 0 success, 1 verification or admission failure, 2 usage,
//! 3 I/O or log unavailable.

mod commands;
mod demo;
mod home;
mod output;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use atlas_core::log::LogError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Parser, Debug)]
#[command(name = "atlas", version, about = "Provenance attestation and verification for ML pipelines")]
struct Cli {
    /// Output format of read commands.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// More logging (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct HomeArg {
    /// Deployment directory created by `atlas provision`.
    #[arg(long, env = "ATLAS_HOME", default_value = ".atlas")]
    pub home: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct LogArg {
    /// Base URL of the log service.
    #[arg(long = "log", env = "ATLAS_LOG_URL")]
    pub log_url: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an Ed25519 key pair as PEM files.
    Keygen {
        /// Private key path; the public key goes to `<out>.pub`.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Create (or re-check) a deployment directory.
    Provision {
        #[command(flatten)]
        home: HomeArg,
        /// Seed deriving the simulated platform, enclaves and producer key.
        #[arg(long)]
        seed: Option<u64>,
        /// Pin the key served by this log.
        #[arg(long = "log", env = "ATLAS_LOG_URL")]
        log_url: Option<String>,
    },
    /// Print the SHA-256 measurement of a file.
    Measure {
        file: PathBuf,
        #[arg(long, default_value = "dataset")]
        role: String,
        /// Artifact id; defaults to a file:// URI of the path.
        #[arg(long)]
        id: Option<String>,
        /// Publish the measurement as a producer-signed golden value.
        #[arg(long, requires = "log_url")]
        publish: bool,
        #[command(flatten)]
        home: HomeArg,
        #[arg(long = "log", env = "ATLAS_LOG_URL")]
        log_url: Option<String>,
    },
    /// Attest one pipeline stage and write its manifest.
    Attest {
        #[command(flatten)]
        home: HomeArg,
        /// Stage (operation) name.
        #[arg(long)]
        name: String,
        #[arg(long = "input")]
        inputs: Vec<PathBuf>,
        #[arg(long = "output", required = true)]
        outputs: Vec<PathBuf>,
        #[arg(long, default_value = "model-weights")]
        output_role: String,
        /// Attestation digest this stage consumed.
        #[arg(long = "precursor")]
        precursors: Vec<String>,
        /// Event record written by `atlas monitor`.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Stage parameter as key=value.
        #[arg(long = "param")]
        params: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Submit a manifest to the log.
    Submit {
        manifest: PathBuf,
        #[command(flatten)]
        log: LogArg,
        #[command(flatten)]
        home: HomeArg,
        /// Also publish golden values for the attested outputs.
        #[arg(long)]
        publish_outputs: bool,
        /// Seal the current tree afterwards (end of a pipeline run).
        #[arg(long)]
        seal: bool,
    },
    /// Verify an artifact's provenance chain.
    Verify {
        /// The artifact file.
        #[arg(long, conflicts_with = "digest", required_unless_present = "digest")]
        artifact: Option<PathBuf>,
        /// The artifact digest, when the file is not at hand.
        #[arg(long)]
        digest: Option<String>,
        /// Expectation JSON.
        #[arg(long)]
        expect: Option<PathBuf>,
        #[command(flatten)]
        log: LogArg,
        #[command(flatten)]
        home: HomeArg,
        /// Pinned log public key (PEM).
        #[arg(long)]
        log_key: Option<PathBuf>,
        /// Let the log service run the verification.
        #[arg(long)]
        remote: bool,
    },
    /// Check the log's tree chain and its consistency with a saved checkpoint.
    Audit {
        #[command(flatten)]
        log: LogArg,
        #[command(flatten)]
        home: HomeArg,
        #[arg(long)]
        log_key: Option<PathBuf>,
        /// Signed roots seen previously; updated after a clean audit.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Watch checkpoints and serve the training bridge; write the event record.
    Monitor {
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long)]
        socket: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many seconds instead of waiting for Ctrl-C.
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 200)]
        debounce_ms: u64,
    },
    /// Run the log service.
    ServeLog {
        #[arg(long)]
        log_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7070")]
        listen: SocketAddr,
        #[command(flatten)]
        home: HomeArg,
    },
    /// Provision, train, attest, log and verify a synthetic pipeline, then attack it.
    Demo {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Artifacts in the provenance chain.
        #[arg(long, default_value_t = 20)]
        artifacts: usize,
        /// Randomized attack injections.
        #[arg(long, default_value_t = 200)]
        injections: usize,
        /// Keep sockets and checkpoints here instead of a temporary directory.
        #[arg(long)]
        work_dir: Option<PathBuf>,
    },
}

/// Bad flags or input documents.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A check or admission said no.
#[derive(Debug)]
pub struct Refused(pub String);

impl std::fmt::Display for Refused {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Refused {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if cause.is::<Refused>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<LogError>() {
            return match e {
                LogError::Rejected(_) => 1,
                LogError::NotFound(_) | LogError::OutOfRange(_) | LogError::EmptyTree => 1,
                LogError::Unavailable(_) => 3,
            };
        }
    }
    3
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let fmt = cli.format;
    match cli.command {
        Command::Keygen { out, force } => commands::keygen(&out, force, fmt),
        Command::Provision { home, seed, log_url } => commands::provision(&home.home, seed, log_url.as_deref(), fmt),
        Command::Measure { file, role, id, publish, home, log_url } => commands::measure(
            &file,
            &role,
            id,
            publish.then_some((&home.home, log_url.as_deref().unwrap_or_default())),
            fmt,
        ),
        Command::Attest { home, name, inputs, outputs, output_role, precursors, events, params, out } => {
            commands::attest(
                &home.home,
                commands::AttestArgs { name, inputs, outputs, output_role, precursors, events, params, out },
                fmt,
            )
        }
        Command::Submit { manifest, log, home, publish_outputs, seal } => {
            commands::submit(&manifest, &log.log_url, &home.home, publish_outputs, seal, fmt)
        }
        Command::Verify { artifact, digest, expect, log, home, log_key, remote } => commands::verify(
            commands::VerifyArgs { artifact, digest, expect, log_url: log.log_url, home: home.home, log_key, remote },
            fmt,
        ),
        Command::Audit { log, home, log_key, checkpoint } => {
            commands::audit(&log.log_url, &home.home, log_key.as_deref(), checkpoint.as_deref(), fmt)
        }
        Command::Monitor { dir, socket, out, duration, debounce_ms } => {
            commands::monitor(dir, socket, &out, duration, debounce_ms, fmt)
        }
        Command::ServeLog { log_dir, listen, home } => commands::serve_log(&log_dir, listen, &home.home),
        Command::Demo { seed, artifacts, injections, work_dir } => {
            demo::run(demo::DemoArgs { seed, artifacts, injections, work_dir }, fmt)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("atlas: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
