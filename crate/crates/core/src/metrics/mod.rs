//! FB-Score, factual shares, split evaluation, and locality measures.

mod eval;
mod fb;

pub use eval::{
    evaluate_split, locality_metrics, pass_at_k, summarize, windows, CaseFailure, CaseResult,
    CategoryScore, EvalSummary, GenderProber, Locality,
};
pub use fb::{factual_shares, fb_score, FactualShares, GenderProbe};

use crate::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("probe failed: {0}")]
    Probe(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}
