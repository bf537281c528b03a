//! Decentralized collaborative filtering by matrix completion.
//!
//! Agents each hold a column block of a sparse rating matrix and a private
//! copy of the user factors. They fit their block locally and agree on the
//! user factors by exchanging replicas with graph neighbors only. A
//! centralized solver of the same objective serves as the reference, and
//! held-out ratings are scored by RMSE and by average percentile rank.

pub mod centralized;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod factors;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod topology;

pub use error::{Error, Result};
