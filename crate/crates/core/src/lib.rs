//! Autoregressive multi-label discourse tagging for threaded discussions.
//!
//! The pipeline: [`corpus`] loads conversation trees, [`encoding`] embeds
//! utterances and their context, [`fusion`] combines the embeddings with
//! pooled context labels, [`objectives`] holds the per-label heads and
//! losses, [`training`] fine-tunes everything end to end, [`parsing`] tags
//! new branches and [`evaluation`] scores them under tree-grouped folds.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoding;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod labels;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod parsing;
pub mod store;
pub mod training;

pub use config::Config;
pub use error::{Error, Result};
