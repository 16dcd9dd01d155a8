use crate::model::ServerId;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown server id {0}")]
    UnknownServer(ServerId),
    #[error("degree constraints cannot be satisfied: {0}")]
    Unsatisfiable(String),
    #[error("cycle in cooperation forest through server {0}")]
    Cycle(ServerId),
    #[error("empty candidate set")]
    NoCandidates,
    #[error("offload split has non-positive denominator {0}")]
    Split(f64),
    #[error("malformed dump at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}
