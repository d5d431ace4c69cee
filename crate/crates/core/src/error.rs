use thiserror::Error;

/// Errors shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The regressor matrix does not have full column rank.
    #[error("rank-deficient regressor: {0}")]
    RankDeficient(String),

    #[error("degenerate realization order: {0}")]
    DegenerateOrder(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("configuration errors:\n{}", .0.join("\n"))]
    Config(Vec<String>),
}

pub type Result<T> = std::result::Result<T, Error>;
