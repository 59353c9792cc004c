//! The toy multimodal decoder.
//!
//! A visual prefix of `n` patch embeddings is followed by up to `m_max`
//! text tokens. Blocks are pre-norm (RMS) with causal multi-head
//! attention and a GELU MLP; the unembedding is the transposed token
//! embedding. The forward pass records, for every head, the last row of
//! its attention weights and output plus the masked-last-row variant
//! that only sees visual positions.

mod attention;
mod bundle;
mod forward;
mod lens;

pub use attention::{attention_head, causal_mask, masked_last_row_mask};
pub use bundle::{
    Annotations, LayerWeights, ModelBundle, ModelConfig, PlantedHead, TensorEntry, Weights,
    CONFIG_FILE, MANIFEST_FILE, WEIGHTS_FILE,
};
pub use forward::{
    forward, ForwardTrace, HeadTap, InterventionHook, SequenceInput, ShiftRows, NORM_EPS,
};
pub use lens::{argmax, decode_logit_lens, lens_logits};
