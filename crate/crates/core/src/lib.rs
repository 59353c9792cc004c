//! Cross-lingual attention-head identification, shift estimation and
//! inference-time intervention on a toy multimodal transformer with
//! planted ground truth.

pub mod analysis;
pub mod artifact;
pub mod cli;
pub mod error;
pub mod intervene;
pub mod model;
pub mod numerics;
pub mod probes;
pub mod shift;
pub mod synth;

pub use error::{Error, Result};
