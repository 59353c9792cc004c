//! Single-head scaled dot-product attention and its masks.
//!
//! Positions are 1-based in the public vocabulary of this crate (visual
//! tokens occupy `1..=n`, text `n+1..=e`); the matrices themselves are
//! indexed from 0 as usual.

use crate::error::{Error, Result};
use crate::numerics::{is_masked, matmul_packed, matmul_wide, softmax_f64, Matrix, Packed, MASKED};

/// `e × e` causal mask: 0 on and below the diagonal, masked above.
pub fn causal_mask(e: usize) -> Matrix {
    let mut m = Matrix::zeros(e, e);
    for i in 0..e {
        for j in (i + 1)..e {
            m.set(i, j, MASKED);
        }
    }
    m
}

/// Mask row for the last position that hides every text column.
///
/// Entries for visual positions `1..=n` are 0, entries `n+1..=e` are
/// masked, which includes the last position itself.
pub fn masked_last_row_mask(e: usize, n: usize) -> Result<Vec<f32>> {
    if n == 0 || n >= e {
        return Err(Error::Shape(format!(
            "masked last row needs 1 <= n < e, got n={n}, e={e}"
        )));
    }
    Ok((0..e).map(|j| if j < n { 0.0 } else { MASKED }).collect())
}

/// Softmax weights and output for a single query row.
///
/// Masked columns are skipped outright, so they receive exactly zero
/// weight and never touch the accumulator.
pub(crate) fn attend_row(
    q: &[f32],
    keys: &Matrix,
    values: &Matrix,
    mask_row: &[f32],
    scale: f64,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let scores: Vec<f64> = mask_row
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            if is_masked(m) {
                f64::NEG_INFINITY
            } else {
                crate::numerics::dot(q, keys.row(j)) * scale + f64::from(m)
            }
        })
        .collect();
    let weights: Vec<f32> = softmax_f64(&scores)?.into_iter().map(|p| p as f32).collect();
    let mut acc = vec![0f64; values.cols()];
    for (j, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let w = f64::from(w);
        for (a, &v) in acc.iter_mut().zip(values.row(j)) {
            *a += w * f64::from(v);
        }
    }
    Ok((weights, acc.into_iter().map(|v| v as f32).collect()))
}

/// `weights = softmax(QKᵀ/√d + mask)`, `output = weights · V`.
pub fn attention_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    mask: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let e = q.rows();
    let d = q.cols();
    if k.rows() != e || v.rows() != e || k.cols() != d || v.cols() != d {
        return Err(Error::Shape(format!(
            "Q {}x{}, K {}x{}, V {}x{} must all be e x d",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    if mask.rows() != e || mask.cols() != e {
        return Err(Error::Shape(format!(
            "mask is {}x{}, expected {e}x{e}",
            mask.rows(),
            mask.cols()
        )));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores = matmul_wide(q, &Packed::new(&k.transpose()))?;
    let mut weights = Matrix::zeros(e, e);
    let mut row = vec![0f64; e];
    for i in 0..e {
        for (j, (r, &m)) in row.iter_mut().zip(mask.row(i)).enumerate() {
            *r = if is_masked(m) {
                f64::NEG_INFINITY
            } else {
                scores[i * e + j] * scale + f64::from(m)
            };
        }
        for (w, p) in weights.row_mut(i).iter_mut().zip(softmax_f64(&row)?) {
            *w = p as f32;
        }
    }
    let output = matmul_packed(&weights, &Packed::new(v))?;
    Ok((weights, output))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn causal_mask_single_token() {
        assert_eq!(causal_mask(1).data(), &[0.0]);
    }

    #[test]
    fn causal_mask_two_tokens() {
        assert_eq!(causal_mask(2).data(), &[0.0, MASKED, 0.0, 0.0]);
    }

    #[test]
    fn causal_mask_counts_upper_triangle() {
        for e in 1..12 {
            let masked = causal_mask(e).data().iter().filter(|v| is_masked(**v)).count();
            assert_eq!(masked, e * (e - 1) / 2);
        }
    }

    #[test]
    fn masked_last_row_examples() {
        assert_eq!(masked_last_row_mask(3, 2).unwrap(), vec![0.0, 0.0, MASKED]);
        assert_eq!(
            masked_last_row_mask(4, 1).unwrap(),
            vec![0.0, MASKED, MASKED, MASKED]
        );
    }

    #[test]
    fn masked_last_row_counts() {
        for e in 2..10 {
            for n in 1..e {
                let row = masked_last_row_mask(e, n).unwrap();
                assert_eq!(row.iter().filter(|v| is_masked(**v)).count(), e - n);
            }
        }
    }

    #[test]
    fn masked_last_row_rejects_n_not_below_e() {
        assert!(matches!(masked_last_row_mask(3, 3), Err(Error::Shape(_))));
        assert!(matches!(masked_last_row_mask(3, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_weights_average_values() {
        let q = Matrix::from_rows(&[[0.0], [0.0]]).unwrap();
        let v = Matrix::from_rows(&[[1.0], [3.0]]).unwrap();
        let (w, o) = attention_head(&q, &q, &v, &causal_mask(2)).unwrap();
        assert_eq!(w.row(1), &[0.5, 0.5]);
        assert_eq!(o.row(1), &[2.0]);
    }

    #[test]
    fn first_row_only_sees_itself() {
        let mut rng = RngStream::new(4);
        let mut rand = |r, c| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.next_gaussian() as f32).collect())
                .unwrap()
        };
        let (q, k, v) = (rand(5, 3), rand(5, 3), rand(5, 3));
        let (w, o) = attention_head(&q, &k, &v, &causal_mask(5)).unwrap();
        assert_eq!(w.row(0)[0], 1.0);
        assert_eq!(o.row(0), v.row(0));
    }

    #[test]
    fn saturated_orthogonal_queries_give_identity() {
        // Large orthogonal rows: softmax saturates onto the diagonal. The
        // reference is the same formula evaluated directly in f64.
        let e = 4;
        let big = 6.0f32;
        let mut q = Matrix::zeros(e, e);
        for i in 0..e {
            q.set(i, i, big);
        }
        let mut rng = RngStream::new(8);
        let v = Matrix::from_vec(e, e, (0..e * e).map(|_| rng.next_gaussian() as f32).collect())
            .unwrap();
        let (w, o) = attention_head(&q, &q, &v, &Matrix::zeros(e, e)).unwrap();
        let self_score = f64::from(big * big) / (e as f64).sqrt();
        let off = 1.0 / (self_score.exp() + (e as f64 - 1.0));
        let diag = 1.0 - (e as f64 - 1.0) * off;
        for i in 0..e {
            assert!(diag > 0.9999);
            assert!((f64::from(w.get(i, i)) - diag).abs() < 1e-6);
            for c in 0..e {
                let reference: f64 = (0..e)
                    .map(|j| if j == i { diag } else { off } * f64::from(v.get(j, c)))
                    .sum();
                assert!((f64::from(o.get(i, c)) - reference).abs() < 1e-6);
                assert!((o.get(i, c) - v.get(i, c)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn weights_zero_exactly_where_masked() {
        let mut rng = RngStream::new(12);
        let e = 6;
        let mut rand = || {
            Matrix::from_vec(e, 2, (0..e * 2).map(|_| rng.next_gaussian() as f32).collect())
                .unwrap()
        };
        let (q, k, v) = (rand(), rand(), rand());
        let mask = causal_mask(e);
        let (w, _) = attention_head(&q, &k, &v, &mask).unwrap();
        for i in 0..e {
            let sum: f64 = w.row(i).iter().map(|&x| f64::from(x)).sum();
            assert!((sum - 1.0).abs() < 1e-5);
            for j in 0..e {
                if is_masked(mask.get(i, j)) {
                    assert_eq!(w.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Matrix::zeros(3, 2);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(
            attention_head(&a, &b, &a, &causal_mask(3)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            attention_head(&a, &a, &a, &causal_mask(2)),
            Err(Error::Shape(_))
        ));
    }
}
