//! Command implementations behind the `attngrounder` binary.

pub mod commands;
pub mod config;
pub mod render;

use thiserror::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{context}: {source}")]
    Data {
        context: String,
        #[source]
        source: attngrounder::Error,
    },

    #[error("{context}: {source}")]
    Output { context: String, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] attngrounder::Error),
}

impl CliError {
    pub fn data(context: impl Into<String>, source: impl Into<attngrounder::Error>) -> Self {
        Self::Data {
            context: context.into(),
            source: source.into(),
        }
    }

    pub fn output(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Output {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use attngrounder::Error as E;
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Data { .. } => EXIT_DATA,
            Self::Output { .. } => EXIT_RUNTIME,
            Self::Core(e) => match e {
                E::Config(_) => EXIT_USAGE,
                E::InvalidQuery(_)
                | E::DegenerateBox(_)
                | E::Manifest { .. }
                | E::EmptyDataset
                | E::CorruptCheckpoint(_)
                | E::CheckpointVersion { .. }
                | E::Incompatible(_)
                | E::Image(_)
                | E::Json(_)
                | E::Io(_) => EXIT_DATA,
                _ => EXIT_RUNTIME,
            },
        }
    }
}
