use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("invalid cut: {0}")]
    InvalidCut(String),
    #[error("rank-deficient design matrix: {0}")]
    DesignRank(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("basis mismatch: {0}")]
    Basis(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("pairing error: {0}")]
    Pairing(String),
    #[error("model selection failed: {0}")]
    Selection(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the command-line tool: 2 for I/O, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            _ => 1,
        }
    }
}
