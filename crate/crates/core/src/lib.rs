//! Hierarchical predictive coding with action-modulated generative units.
//!
//! Every layer keeps a bank of convolutional LSTM units. A small MLP turns
//! the current motor action into softmax weights over the bank, and the
//! weighted sum of unit outputs is the representation from which the layer
//! predicts its input. Rectified prediction errors travel up the hierarchy.
//!
//! The crate carries its own dense tensor type and a tape-based reverse-mode
//! differentiator so that training needs no external numerical stack.

pub mod cells;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod network;
pub mod tensor;
pub mod training;

pub use data::{Dataset, Sequence};
pub use error::{Error, Result};
pub use network::{Network, NetworkConfig, Parameters};
pub use tensor::{Padding, PaddingMode, Real, Tensor};
