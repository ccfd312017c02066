//! Sequential recommendation with pathway-routed attention.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, checkpoint container
//! - [`data`]: interaction logs, fixed-length sequences, leave-one-out split,
//!   synthetic pathway generator
//! - [`model`]: the routed transformer, its router, and the unrouted baseline
//! - [`train`]: pairwise ranking loss, negative sampling, Adam, early stopping
//! - [`eval`]: sampled-negative ranking metrics and route diagnostics
//! - [`experiment`]: config files, manifests, and artifact layout for the CLI

pub mod data;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod tensor;
pub mod train;
