//! Streaming 4D reconstruction toolkit: a toy frame-causal transformer with
//! KV-cache inference, motion-aware training losses, motion-mask extraction
//! and pose/depth evaluation.

pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod layout;
pub mod losses;
pub mod model;
pub mod motion;
pub mod pose;
pub mod rng;
pub mod scene;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
