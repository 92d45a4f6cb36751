//! Explainable no-reference image quality assessment for skin photographs:
//! synthetic corpus generation, multi-rater label fusion, a two-headed
//! convolutional classifier with hand-written backpropagation, training with
//! decoupled weight decay and cosine restarts, evaluation metrics, and
//! gradient-based attention maps.

pub mod cli;
pub mod corpus;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod training;
pub mod types;

pub use error::{Error, Result};
