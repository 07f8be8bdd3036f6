use alloc::string::String;

use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("mask has no set pixels")]
    EmptyMask,
    #[error("no proposals to initialize queries from")]
    EmptyProposals,
    #[error("scene has no ground-truth boxes")]
    NoGroundTruth,
    #[error("count mismatch: {left} predictions vs {right} targets")]
    CountMismatch { left: usize, right: usize },
    #[error("loss component `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("refusing to corrupt an evaluation split")]
    CorruptEvalSplit,
}

pub type Result<T> = core::result::Result<T, Error>;
