use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{0} is not a sum of two squares")]
    NotInS(u64),

    #[error("lattice point set is empty")]
    EmptyLattice,

    #[error("unsupported correlation order K={0} (supported: 1, 2, 3)")]
    UnsupportedOrder(u32),

    #[error("refusing to count S_{order}: N_n = {n_points} exceeds the cap of {cap} points (O(N^3) memory)")]
    CorrelationCap {
        order: u32,
        n_points: usize,
        cap: usize,
    },

    #[error("coefficient key ({0}, {1}) is not in the half lattice set")]
    KeyOutsideHalfSet(i64, i64),

    #[error("grid resolution M={got} is too small (need at least {need})")]
    GridTooSmall { got: usize, need: usize },

    #[error("gradients are required but the grid was evaluated without them")]
    MissingGradient,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
