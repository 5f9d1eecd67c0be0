use thiserror::Error;

/// Errors produced by the model, the selection step, the decoding engine and
/// the cost model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid model configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("capacity exceeded: {needed} positions requested, max_seq_len is {max}")]
    Capacity { needed: usize, max: usize },

    #[error("invalid sparse selection: {0}")]
    Selection(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("cannot roll back to length {to}: cache holds only {len} positions")]
    Rollback { to: usize, len: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid cost-model input: {0}")]
    CostInput(String),

    #[error("average I/O per token is undefined when alpha = 0")]
    UndefinedAverage,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
