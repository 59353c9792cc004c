use super::bundle::ModelBundle;
use super::forward::{unembed_row, ForwardTrace};
use crate::error::{Error, Result};

/// Ranked `(token, logit)` pairs for `X^layer` at a 1-based position.
///
/// Ranking is by logit descending, ties by token id ascending.
pub fn decode_logit_lens(
    model: &ModelBundle,
    trace: &ForwardTrace,
    layer: usize,
    position: usize,
    top: usize,
) -> Result<Vec<(usize, f32)>> {
    let logits = lens_logits(model, trace, layer, position)?;
    let mut ranked: Vec<(usize, f32)> = logits.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(top);
    Ok(ranked)
}

/// Full logit vector of the lens at one `(layer, position)`.
pub fn lens_logits(
    model: &ModelBundle,
    trace: &ForwardTrace,
    layer: usize,
    position: usize,
) -> Result<Vec<f32>> {
    let layers = trace.hidden.len() - 1;
    if layer > layers {
        return Err(Error::Input(format!("layer {layer} > {layers}")));
    }
    let e = trace.seq_len();
    if position == 0 || position > e {
        return Err(Error::Input(format!("position {position} outside 1..={e}")));
    }
    Ok(unembed_row(model, trace.hidden[layer].row(position - 1)))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
