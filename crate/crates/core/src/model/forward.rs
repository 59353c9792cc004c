use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::attention::{attend_row, attention_head, causal_mask, masked_last_row_mask};
use super::bundle::ModelBundle;
use crate::error::{Error, Result};
use crate::numerics::{gelu, matmul_packed, rms_norm, rms_norm_into, Matrix};

pub const NORM_EPS: f64 = 1e-6;

/// Which rows of a hooked head's output receive `α·S`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ShiftRows {
    #[default]
    All,
    Last,
}

/// One prompt: a visual prefix followed by text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub patches: Matrix,
    pub tokens: Vec<usize>,
    pub language: String,
}

impl SequenceInput {
    pub fn new(patches: Matrix, tokens: Vec<usize>, language: impl Into<String>) -> Self {
        Self {
            patches,
            tokens,
            language: language.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.patches.rows() + self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-head shifts added to attention outputs before the output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionHook {
    alpha: f64,
    rows: ShiftRows,
    shifts: BTreeMap<(usize, usize), Vec<f32>>,
}

impl InterventionHook {
    pub fn new(alpha: f64, rows: ShiftRows) -> Self {
        Self {
            alpha,
            rows,
            shifts: BTreeMap::new(),
        }
    }

    pub fn with_shift(mut self, layer: usize, head: usize, shift: Vec<f32>) -> Self {
        self.shifts.insert((layer, head), shift);
        self
    }

    pub fn insert(&mut self, layer: usize, head: usize, shift: Vec<f32>) {
        self.shifts.insert((layer, head), shift);
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rows(&self) -> ShiftRows {
        self.rows
    }

    pub fn contains(&self, layer: usize, head: usize) -> bool {
        self.shifts.contains_key(&(layer, head))
    }

    pub fn shift(&self, layer: usize, head: usize) -> Option<&[f32]> {
        self.shifts.get(&(layer, head)).map(Vec::as_slice)
    }

    pub fn heads(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.shifts.keys().copied()
    }

    fn validate(&self, model: &ModelBundle) -> Result<()> {
        let c = model.config();
        if !self.alpha.is_finite() {
            return Err(Error::Plan(format!("alpha {} is not finite", self.alpha)));
        }
        for (&(l, h), s) in &self.shifts {
            if l >= c.layers || h >= c.heads {
                return Err(Error::Plan(format!("hooked head ({l}, {h}) outside the model grid")));
            }
            if s.len() != c.head_dim {
                return Err(Error::Plan(format!(
                    "shift for ({l}, {h}) has length {}, expected {}",
                    s.len(),
                    c.head_dim
                )));
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::Plan(format!("shift for ({l}, {h}) is not finite")));
            }
        }
        Ok(())
    }
}

/// Last-row records of one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTap {
    /// Attention weights of the last position, `Ã[e]`.
    pub weights: Vec<f32>,
    /// Last output row `O[e]`, offsets included.
    pub output: Vec<f32>,
    /// Weight row recomputed with every text column masked.
    pub masked_weights: Vec<f32>,
    /// Output row `Ô[e]` from the masked weights, with the same last-row offset.
    pub masked_output: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub n_patches: usize,
    pub heads_per_layer: usize,
    /// `X^0 ..= X^L`, each `e × d_model`.
    pub hidden: Vec<Matrix>,
    /// Residual stream right after each layer's attention block.
    pub post_attention: Vec<Matrix>,
    /// Indexed `layer * H + head`.
    pub heads: Vec<HeadTap>,
    pub logits: Vec<f32>,
}

impl ForwardTrace {
    pub fn head(&self, layer: usize, head: usize) -> &HeadTap {
        &self.heads[layer * self.heads_per_layer + head]
    }

    pub fn seq_len(&self) -> usize {
        self.hidden[0].rows()
    }

    pub fn layers(&self) -> usize {
        self.post_attention.len()
    }

    /// Bytes of every recorded value, for equality checks and hashing.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for m in self.hidden.iter().chain(&self.post_attention) {
            out.extend(m.to_le_bytes());
        }
        for t in &self.heads {
            for v in [&t.weights, &t.output, &t.masked_weights, &t.masked_output] {
                out.extend(crate::numerics::f32s_to_le_bytes(v));
            }
        }
        out.extend(crate::numerics::f32s_to_le_bytes(&self.logits));
        out
    }
}

pub(crate) fn validate_input(model: &ModelBundle, input: &SequenceInput) -> Result<()> {
    let c = model.config();
    if input.patches.rows() != c.n_patches || input.patches.cols() != c.d_model {
        return Err(Error::Input(format!(
            "patches are {}x{}, model expects {}x{}",
            input.patches.rows(),
            input.patches.cols(),
            c.n_patches,
            c.d_model
        )));
    }
    if input.tokens.is_empty() || input.tokens.len() > c.max_text_tokens {
        return Err(Error::Input(format!(
            "text length {} outside 1..={}",
            input.tokens.len(),
            c.max_text_tokens
        )));
    }
    if let Some(&t) = input.tokens.iter().find(|&&t| t >= c.vocab_size) {
        return Err(Error::Input(format!("token id {t} >= vocab size {}", c.vocab_size)));
    }
    if !input.patches.is_finite() {
        return Err(Error::Input("patch embeddings contain non-finite values".into()));
    }
    Ok(())
}

/// Full forward pass with optional intervention.
///
/// Per head, the plant offset of the input language (every row) and the
/// hook's `α·S` (rows per [`ShiftRows`]) are summed in 64 bits and added
/// to the head's output rows before the output projection. A zero offset
/// is skipped entirely, so `α = 0` leaves every bit unchanged.
pub fn forward(
    model: &ModelBundle,
    input: &SequenceInput,
    hook: Option<&InterventionHook>,
) -> Result<ForwardTrace> {
    validate_input(model, input)?;
    if let Some(h) = hook {
        h.validate(model)?;
    }
    let c = model.config();
    let w = model.weights();
    let (n, d, dm, heads) = (c.n_patches, c.head_dim, c.d_model, c.heads);
    let e = input.len();
    let scale = 1.0 / (d as f64).sqrt();

    let mut x = Matrix::zeros(e, dm);
    for i in 0..n {
        x.row_mut(i).copy_from_slice(input.patches.row(i));
    }
    for (t, &tok) in input.tokens.iter().enumerate() {
        x.row_mut(n + t).copy_from_slice(w.embed.row(tok));
    }

    let causal = causal_mask(e);
    let masked_row = masked_last_row_mask(e, n)?;

    let mut hidden = Vec::with_capacity(c.layers + 1);
    let mut post_attention = Vec::with_capacity(c.layers);
    let mut taps = Vec::with_capacity(c.layers * heads);

    for (l, lw) in w.layers.iter().enumerate() {
        let packed = &model.packed[l];
        let normed = rms_norm(&x, &lw.attn_norm, NORM_EPS);
        let qkv = matmul_packed(&normed, &packed.w_qkv)?;
        let mut concat = Matrix::zeros(e, dm);
        for h in 0..heads {
            let q = qkv.column_block(h * d, d);
            let k = qkv.column_block(dm + h * d, d);
            let v = qkv.column_block(2 * dm + h * d, d);
            let (all_rows, last_row) = head_offsets(model, hook, l, h, &input.language);

            let (weights, mut out) = attention_head(&q, &k, &v, &causal)?;
            for i in 0..e {
                let offset = if i + 1 == e { &last_row } else { &all_rows };
                add_offset(out.row_mut(i), offset.as_deref());
                concat.row_mut(i)[h * d..(h + 1) * d].copy_from_slice(out.row(i));
            }
            let (masked_weights, mut masked_output) =
                attend_row(q.row(e - 1), &k, &v, &masked_row, scale)?;
            add_offset(&mut masked_output, last_row.as_deref());
            taps.push(HeadTap {
                weights: weights.row(e - 1).to_vec(),
                output: concat.row(e - 1)[h * d..(h + 1) * d].to_vec(),
                masked_weights,
                masked_output,
            });
        }
        let attn = matmul_packed(&concat, &packed.w_o)?;
        hidden.push(std::mem::replace(&mut x, Matrix::zeros(0, 0)));
        let mut mid = hidden[l].clone();
        for (a, b) in mid.data_mut().iter_mut().zip(attn.data()) {
            *a += *b;
        }
        let normed = rms_norm(&mid, &lw.mlp_norm, NORM_EPS);
        let mut inner = matmul_packed(&normed, &packed.w_in)?;
        for v in inner.data_mut() {
            *v = gelu(f64::from(*v)) as f32;
        }
        let mlp = matmul_packed(&inner, &packed.w_out)?;
        let mut next = mid.clone();
        for (a, b) in next.data_mut().iter_mut().zip(mlp.data()) {
            *a += *b;
        }
        post_attention.push(mid);
        x = next;
    }

    let logits = unembed_row(model, x.row(e - 1));
    hidden.push(x);
    Ok(ForwardTrace {
        n_patches: n,
        heads_per_layer: heads,
        hidden,
        post_attention,
        heads: taps,
        logits,
    })
}

/// Logits of one residual vector: final norm, then the tied unembedding.
pub(crate) fn unembed_row(model: &ModelBundle, row: &[f32]) -> Vec<f32> {
    let mut normed = Matrix::zeros(1, row.len());
    rms_norm_into(row, &model.weights().final_norm, NORM_EPS, normed.row_mut(0));
    matmul_packed(&normed, &model.unembed)
        .expect("unembedding matches d_model")
        .into_data()
}

/// Offsets for (non-last rows, last row), `None` where nothing is added.
fn head_offsets(
    model: &ModelBundle,
    hook: Option<&InterventionHook>,
    layer: usize,
    head: usize,
    language: &str,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let d = model.config().head_dim;
    let plant = model.plant(layer, head, language);
    let shift = hook.and_then(|h| h.shift(layer, head).map(|s| (h.alpha(), h.rows(), s)));
    let build = |with_shift: bool| -> Option<Vec<f64>> {
        let mut off = vec![0f64; d];
        if let Some(b) = plant {
            for (o, &v) in off.iter_mut().zip(b) {
                *o += f64::from(v);
            }
        }
        if with_shift {
            if let Some((alpha, _, s)) = shift {
                for (o, &v) in off.iter_mut().zip(s) {
                    *o += alpha * f64::from(v);
                }
            }
        }
        off.iter().any(|&v| v != 0.0).then_some(off)
    };
    let all_rows = shift.is_some_and(|(_, rows, _)| rows == ShiftRows::All);
    (build(all_rows), build(true))
}

fn add_offset(row: &mut [f32], offset: Option<&[f64]>) {
    if let Some(off) = offset {
        for (r, &o) in row.iter_mut().zip(off) {
            *r = (f64::from(*r) + o) as f32;
        }
    }
}
