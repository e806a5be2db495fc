//! A small tape-based reverse-mode autodiff engine over dense `f64`
//! tensors, sized for the sequence models in this workspace: enough
//! primitives to express embedding lookups, bidirectional LSTMs, bilinear
//! attention, and masked softmax/cross-entropy losses — plus Adam and a
//! finite-difference gradient checker to keep the backward rules honest.
//!
//! The design trades generality for checkability: shapes are 1-D or 2-D,
//! broadcasting is limited to what the models use, and everything runs in
//! double precision so central differences resolve at 1e-4 relative error.

mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod rnn;
mod tape;
mod tensor;

pub use error::{AutogradError, Result};
pub use gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
pub use optim::{Adam, ParameterStore};
pub use rnn::{bilstm, lstm_cell, BiLstmParams, LstmParams};
pub use tape::Tape;
pub use tensor::Tensor;
