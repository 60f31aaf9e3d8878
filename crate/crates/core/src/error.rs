use std::io;

use thiserror::Error;

/// Errors produced anywhere in the engine.
///
/// The variants double as the CLI's failure categories, so every variant's
/// message carries a stable prefix.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("overflow error: {needed} positions requested, capacity {capacity}")]
    Overflow { needed: usize, capacity: usize },

    #[error("token error: id {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },

    #[error("input error: {0}")]
    Input(String),

    #[error("format error in record `{record}`: {message}")]
    Format { record: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn format(record: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            record: record.into(),
            message: message.into(),
        }
    }

    /// Short category name, used for CLI exit codes and message prefixes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Config(_) => "config",
            Error::Overflow { .. } => "overflow",
            Error::TokenOutOfVocab { .. } => "token",
            Error::Input(_) => "input",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
