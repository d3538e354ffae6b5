//! Dense f64 tensors, a reverse-mode gradient tape, multi-head attention
//! built from tape primitives, and a finite-difference gradient checker.

mod attention;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use attention::{multi_head_attention, AttentionParamIds, AttentionParams, AttnMask};
pub use gradcheck::check_gradient;
pub use tape::{GradTape, TensorId};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("{op} requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { op: &'static str, shape: Vec<usize> },
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<(), NumericsError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite { op })
    }
}
