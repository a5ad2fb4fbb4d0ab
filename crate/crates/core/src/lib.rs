//! A small convolutional network engine and transfer-learning toolkit for
//! age-group classification on the eight-label Adience taxonomy.
//!
//! The pipeline: build the VGG-style trunk, swap its fully connected head
//! for a fresh one, fine-tune only the head with momentum SGD, predict with
//! three-crop softmax averaging, and score with exact and 1-off accuracy.

pub mod error;
pub mod layers;
pub mod data;
pub mod inference;
pub mod checkpoint;
pub mod cli;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Real, Tensor};
