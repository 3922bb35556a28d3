//! Attention-based encoder-decoder with a word-frequency estimation head and a
//! frequency-capped beam search.

pub mod beam;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod graph;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;
pub mod wfe;

pub use error::{Error, Result};
