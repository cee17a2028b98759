//! Sparse mixture-of-experts layers with a family of parameter-efficient
//! adaptation strategies (routed, embedded, dense-shared, single-shared and
//! MoE-agnostic baselines), plus training, parameter accounting and
//! router-dynamics analysis at desk scale.

pub mod adapters;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod model;
pub mod moe;
pub mod numeric;
pub mod train;

pub use error::{PerftError, Result};
