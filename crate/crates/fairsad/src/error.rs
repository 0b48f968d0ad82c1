use thiserror::Error;

#[derive(Debug, Error)]
pub enum FairsadError {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    Shape { op: String, node: usize, detail: String },

    #[error("backward requires a scalar output, node {node} is {rows}x{cols}")]
    NonScalarBackward { node: usize, rows: usize, cols: usize },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("data error in {path} row {row}: {detail}")]
    Data { path: String, row: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric precondition violated: {0}")]
    Metric(String),

    #[error("training diverged at epoch {epoch}: total loss is not finite")]
    Diverged { epoch: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl FairsadError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        FairsadError::Io { path: path.into(), source }
    }
}
