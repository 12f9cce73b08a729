use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    Dimension {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("inconsistent trace or network: {0}")]
    Consistency(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("protocol violation at node {node}: {msg}")]
    Protocol { node: usize, msg: String },

    #[error("view from node {0} is unavailable")]
    UnavailableView(usize),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("joint alphabet has {cells} cells, limit is {limit}")]
    AlphabetOverflow { cells: u128, limit: u128 },

    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },

    #[error("{}", config_message(.line, .msg))]
    Config { line: Option<usize>, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn config_message(line: &Option<usize>, msg: &str) -> String {
    match line {
        Some(l) => format!("config line {l}: {msg}"),
        None => format!("config: {msg}"),
    }
}

impl Error {
    pub(crate) fn protocol(node: usize, msg: impl Into<String>) -> Self {
        Error::Protocol {
            node,
            msg: msg.into(),
        }
    }
}
