mod estimate;
mod study;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] medtmle::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Core(medtmle::Error::Data(_) | medtmle::Error::InvalidRow { .. }) => "data",
            CliError::Core(medtmle::Error::Config(_)) => "config",
            CliError::Core(
                medtmle::Error::Schema(_)
                | medtmle::Error::DuplicateNode(_)
                | medtmle::Error::EmptySupport(_)
                | medtmle::Error::OutcomeOutsideBlock(_)
                | medtmle::Error::UnknownNode(_),
            ) => "schema",
            CliError::Core(medtmle::Error::Target(_)) => "target",
            CliError::Core(medtmle::Error::Json(_)) => "json",
            CliError::Core(_) => "estimation",
            CliError::Io { .. } => "io",
            CliError::Usage(_) => "usage",
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Exit status of a successful command.
pub enum Status {
    Done,
    NotConverged,
}

#[derive(Parser)]
#[command(name = "medtmle", version, about = "TMLE for longitudinal mediation effects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate targets, contrasts and intervals on a data set.
    Estimate(estimate::EstimateArgs),
    /// Simulate one data set from a scenario design.
    Simulate(study::SimulateArgs),
    /// Run a replicate study and write its metrics table.
    ReplicateStudy(study::StudyArgs),
    /// Combine study summaries into comparison tables.
    Report(study::ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if !e.use_stderr() {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = json!({"error": "usage", "message": e.to_string().trim_end()});
            eprintln!("{msg}");
            return ExitCode::from(1);
        }
    };
    let res = match cli.command {
        Command::Estimate(a) => estimate::run(a),
        Command::Simulate(a) => study::simulate(a),
        Command::ReplicateStudy(a) => study::replicate_study(a),
        Command::Report(a) => study::report(a),
    };
    match res {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::NotConverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}

pub fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create(path: &Path) -> CliResult<std::fs::File> {
    std::fs::File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn out_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(medtmle::Error::from)?;
    std::fs::write(path, text + "\n").map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn require_seed(seed: Option<u64>) -> CliResult<u64> {
    seed.ok_or_else(|| CliError::Usage("a seed is required: pass --seed or set MEDT_SEED".into()))
}
