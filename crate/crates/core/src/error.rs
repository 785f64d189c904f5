use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid knowledge graph: {0}")]
    Graph(String),

    #[error("view {view}: {message}")]
    View { view: String, message: String },

    #[error("degenerate embedding: {0}")]
    Degenerate(String),

    #[error("invalid batch: {0}")]
    Batch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("singular covariance for class {class}")]
    Singular { class: String },

    #[error("insufficient data: {0}")]
    Data(String),

    #[error("expected {expected} bytes, found {actual} in {path}")]
    FileSize { path: String, expected: u64, actual: u64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Autodiff(#[from] ctxf_autodiff::AutodiffError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
