//! The editable decoder-only transformer and everything needed to address,
//! trace, ablate, and persist its parameters.

mod address;
mod checkpoint;
mod config;
pub mod tokenizer;
mod transformer;

pub use address::{Depth, ModuleKind, ParameterAddress};
pub use config::ModelConfig;
pub use tokenizer::Tokenizer;
pub use transformer::{
    Coverage, ForwardOptions, ForwardOutput, LayerCapture, LayerTrace, LogitsMode,
    MiniTransformer, ParamView, TapeForward, PARAMS_PER_LAYER,
};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("address error: {0}")]
    Address(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("tokenization failed: {0}")]
    Tokenize(String),
    #[error("non-finite model output: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
