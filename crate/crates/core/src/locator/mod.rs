//! Locating bias-relevant parameters at layer, module, row, and neuron
//! granularity.

mod gradient;
mod layer;
mod mask;
mod modules;
mod pipeline;
mod report;

pub use gradient::{cosine, gradient_pair, locate_neuron, locate_row, GradientPair, RowAggregate, RowConfig};
pub use layer::{layer_importances, locate_layer};
pub use mask::{Granularity, GranularityMask};
pub use modules::{correlation_matrix, locate_module};
pub use pipeline::{build_mask, locate, row_module, LocateConfig, LocateReports};
pub use report::ImportanceReport;

use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum LocateError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("mask nesting violated: {0}")]
    Nesting(String),
    #[error("pipeline order: {0}")]
    Pipeline(String),
    #[error("degenerate gradient: {0}")]
    Degenerate(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
