//! Residual Swin transformer channel-attention network for Bayer demosaicing.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{CaMode, ModelConfig, RstcaNet};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{Scalar, Tape, Tensor, Var};
