//! Experiment driver: argument parsing, config handling and one module per
//! subcommand. Every artifact is written without timestamps so reruns are
//! byte-identical.

pub mod args;
pub mod cmd;
pub mod config;
pub mod output;

use std::fmt;

use alignlite::eval::EvalError;
use alignlite::train::TrainError;

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad input, config or usage (exit 2).
    Input(anyhow::Error),
    /// Numerical breakdown during training or evaluation (exit 3).
    Numeric(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        Failure::Input(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(e) | Failure::Numeric(e) => write!(f, "{e:#}"),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

pub type CmdResult<T> = Result<T, Failure>;

pub fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::NonFiniteLoss { .. } => Failure::Numeric(e.into()),
        other => Failure::Input(other.into()),
    }
}

pub fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::NonFinitePrototypes => Failure::Numeric(e.into()),
        other => Failure::Input(other.into()),
    }
}

/// Parse arguments and run one command.
pub fn run(cli: args::Cli) -> CmdResult<()> {
    cmd::dispatch(cli)
}
