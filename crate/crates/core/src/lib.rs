//! Multi-scale four-directional 2D recurrent networks over pooled region
//! grids: a minimal convolutional frontend, simple and LSTM scan cells with
//! cross-scale context, a softmax head, gradient-exact backpropagation
//! through the unrolled scans, and a deterministic training loop.

pub mod config;
pub mod convnet;
pub mod data;
pub mod error;
pub mod head;
pub mod hrnn;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
