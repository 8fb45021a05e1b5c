use flowgen_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid action {action}: {rule}")]
    InvalidAction { action: String, rule: &'static str },

    #[error("state is terminal")]
    TerminalState,

    #[error("state is not terminal")]
    NotTerminal,

    #[error("operation requires at least one fragment")]
    EmptyState,

    #[error("the initial state has no parents")]
    InitialState,

    #[error("enumeration exceeded the budget of {0} states")]
    BudgetExceeded(usize),

    #[error("invalid fragment: {0}")]
    InvalidFragment(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid molecule: {0}")]
    InvalidMolecule(String),

    #[error("no fragment reaches the frequency threshold of {threshold} molecules")]
    EmptyVocabulary { threshold: usize },

    #[error("pocket {context}: {message}")]
    Pocket { context: String, message: String },

    #[error("{what} out of range: {value}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Oracle(#[from] crate::oracle::OracleError),

    #[error(transparent)]
    Nn(#[from] NnError),

    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn out_of_range(what: &'static str, value: f64) -> Error {
    Error::OutOfRange { what, value }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::File { path: path.display().to_string(), source })
}
