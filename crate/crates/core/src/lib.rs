//! Keyword spotting with a CRNN encoder and multi-head attention whose heads
//! are regularized toward inter-head orthogonality and intra-head
//! similarity.

pub mod attention;
pub mod audio;
pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod regularization;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{KwsError, Result};
pub use model::{Architecture, ModelParameters};
pub use regularization::{LossBreakdown, RegularizationConfig};
pub use tensor::Tensor;
