//! Personalized alignment with shared low-rank reward representations.
//!
//! Each user scores a (context, action) pair with a bilinear form built from a shared
//! set of `J` matrices and a private head: `R(x, a, i) = Σ_j λ_{j,i} xᵀ W_j a`. The crate
//! generates such instances, simulates multinomial-logit feedback, fits the class by
//! regularized empirical risk minimization, and measures regret and head diversity.

// NaN-rejecting comparisons and index loops over paired matrices are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::unnecessary_map_or)]

pub mod config;
pub mod diversity;
pub mod error;
pub mod fit;
pub mod instance;
pub mod io;
pub mod manifest;
pub mod offline;
pub mod online;
pub mod policy;
pub mod regret;
pub mod rng;
pub mod score;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use fit::{
    empirical_loss, fit, gauge_fix, init_gradient_svd, FitConfig, FitReport, PreferenceRecord,
};
pub use config::ExperimentConfig;
pub use instance::{
    build_instance, gap_stats, generate_degenerate_instance, generate_instance, pair_gaps, GapStats,
    InstanceConfig, PairGap, ProblemInstance,
};
pub use rng::{stream_rng, stream_seed, Stream};
pub use score::RewardModel;
