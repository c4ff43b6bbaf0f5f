use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("index {index} out of range (length {len}) in {context}")]
    Index {
        context: &'static str,
        index: usize,
        len: usize,
    },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocab { id: usize, size: usize },
    #[error("sequence for {context} too long: {len} > {max}")]
    Length {
        context: String,
        len: usize,
        max: usize,
    },
    #[error("unknown slot `{0}`")]
    UnknownSlot(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint corrupted: {0}")]
    Corruption(String),
    #[error("training diverged in epoch {epoch}, batch {batch}: loss = {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
