//! Dense linear algebra and random numbers shared by every other module.
//!
//! Storage is 32-bit, accumulation is 64-bit. Masked attention entries are
//! stored as [`MASKED`] (the most negative finite `f32`) and read back as
//! exact negative infinity by [`softmax_row`].

mod kernel;
mod matrix;
mod rng;

pub use kernel::{product_generic, Packed};
pub use matrix::Matrix;
pub(crate) use matrix::{f32s_to_le_bytes, le_bytes_to_f32s};
pub use rng::{derive_seed, mix64, RngStream};

use crate::error::{Error, Result};

/// Stored encoding of a masked (−∞) entry.
pub const MASKED: f32 = f32::MIN;

/// True for entries that softmax treats as exactly −∞.
#[inline]
pub fn is_masked(v: f32) -> bool {
    v <= MASKED
}

/// Matrix product with 64-bit accumulation.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    matmul_packed(a, &Packed::new(b))
}

/// Matrix product against a pre-widened right operand.
pub fn matmul_packed(a: &Matrix, b: &Packed) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(kernel::product(a, b))
}

/// Matrix product left unrounded in 64 bits, row-major.
pub fn matmul_wide(a: &Matrix, b: &Packed) -> Result<Vec<f64>> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(kernel::product_wide(a, b))
}

/// Numerically stable softmax of one row.
///
/// Entries at or below [`MASKED`] (including −∞) come out as exactly 0.
pub fn softmax_row(v: &[f32]) -> Result<Vec<f32>> {
    let wide: Vec<f64> = v
        .iter()
        .map(|&x| {
            if is_masked(x) {
                f64::NEG_INFINITY
            } else {
                f64::from(x)
            }
        })
        .collect();
    Ok(softmax_f64(&wide)?.into_iter().map(|p| p as f32).collect())
}

/// Softmax over 64-bit scores; `-inf` entries map to 0.
pub fn softmax_f64(v: &[f64]) -> Result<Vec<f64>> {
    let max = v
        .iter()
        .copied()
        .filter(|x| *x != f64::NEG_INFINITY)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow);
    }
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| {
            if x == f64::NEG_INFINITY {
                0.0
            } else {
                (x - max).exp()
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Dot product accumulated in 64 bits.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// RMS normalization of every row, scaled by `gain`.
pub fn rms_norm(x: &Matrix, gain: &[f32], eps: f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        rms_norm_into(x.row(r), gain, eps, out.row_mut(r));
    }
    out
}

pub(crate) fn rms_norm_into(row: &[f32], gain: &[f32], eps: f64, out: &mut [f32]) {
    let ms = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(row).zip(gain) {
        *o = (f64::from(v) * inv * f64::from(g)) as f32;
    }
}

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}
