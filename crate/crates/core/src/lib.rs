//! Unsupervised detection and explanation of malicious agents in
//! multi-agent dialogue graphs.
//!
//! The pipeline attributes every agent response at sentence and token level,
//! encodes both levels with one message-passing layer plus a skip connection,
//! scores agents against per-graph theme prototypes, fuses the two levels
//! with a covariance weight and prunes the top-scoring agents.

pub mod detector;
pub mod embed;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
