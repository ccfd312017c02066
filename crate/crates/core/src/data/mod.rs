//! Interaction logs, fixed-length behavior sequences, the leave-one-out
//! split, and the synthetic pathway generator.

mod log;
mod sequence;
mod synth;

pub use log::{load_interactions, parse_interactions, Interaction, InteractionLog, RawRecord};
pub use sequence::{
    build_sequences, leave_one_out_split, BehaviorSequence, SplitDataset, WindowMode,
};
pub use synth::{
    load_pivots, synth_generate, Archetype, PivotLabels, SyntheticData, SyntheticSpec,
    SyntheticUser,
};

use thiserror::Error;

pub const DEFAULT_MIN_COUNT: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty after filtering users and items with fewer than {min_count} records")]
    Empty { min_count: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
