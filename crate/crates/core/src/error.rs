use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector with zero Euclidean norm was used where a direction is required.
    #[error("zero-norm vector: similarity is undefined")]
    ZeroVector,

    #[error("vector length mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),

    #[error("invalid pooling: cannot pool {in_h}x{in_w} to {out_h}x{out_w}")]
    InvalidPooling {
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
    },

    #[error("adapter shape mismatch: {0}")]
    AdapterShape(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("invalid token grid: {0}")]
    InvalidGrid(String),

    #[error("invalid needle: {0}")]
    InvalidNeedle(String),

    #[error("empty video: no frames to compress")]
    EmptyVideo,

    #[error("budget infeasible: {budget} tokens cannot hold {required} anchor windows")]
    BudgetInfeasible { budget: usize, required: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
