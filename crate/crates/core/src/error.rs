use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(
        "no seed in [{start_seed}, {start_seed} + {retries}) reached the gap target {target} \
         (best min gap {best_gap})"
    )]
    GapUnreachable {
        start_seed: u64,
        retries: u32,
        target: f64,
        best_gap: f64,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty action bank")]
    EmptyBank,

    #[error("action bank of user {user} has fewer than two actions")]
    DegenerateBank { user: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("need at least {needed} checkpoints with positive regret, found {found}")]
    InsufficientPositivePoints { needed: usize, found: usize },

    #[error("invalid slate mode: {0}")]
    InvalidMode(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
