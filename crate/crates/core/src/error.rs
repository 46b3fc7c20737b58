use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at {location}: {reason}")]
    Malformed { location: String, reason: String },

    #[error("unknown label name(s) {names:?} (node {node_id})")]
    UnknownLabel { node_id: String, names: Vec<String> },

    #[error("tree {tree_id}: node {node_id} has parent {parent_id} which is not in the tree")]
    Orphan {
        tree_id: String,
        node_id: String,
        parent_id: String,
    },

    #[error("tree {tree_id}: {reason}")]
    InvalidTree { tree_id: String, reason: String },

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("cannot plan {n_folds} folds over {n_trees} trees")]
    Folds { n_folds: usize, n_trees: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("cross-validation incomplete: {0}")]
    FoldsDiverged(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Dimension {
            context,
            expected,
            got,
        }
    }
}
