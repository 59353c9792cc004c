//! Matrix product kernel with 64-bit accumulation.
//!
//! The right operand is widened to `f64` once ([`Packed`]) so the inner
//! loop is a plain multiply-add over `f64` lanes. The same loop body is
//! compiled for AVX-512F, AVX2 and baseline targets and picked at run
//! time. Every output entry accumulates `a[i,p] * b[p,j]` for
//! `p = 0..k` in order with separate multiply and add (no fused
//! contraction), so all three builds produce identical bits.

use super::Matrix;

/// Right-hand operand widened to 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Packed {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Packed {
    pub fn new(m: &Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            data: m.data().iter().map(|&v| f64::from(v)).collect(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `a · b` into a fresh matrix. Caller checks `a.cols() == b.rows()`.
pub(crate) fn product(a: &Matrix, b: &Packed) -> Matrix {
    let wide = product_wide(a, b);
    let data = wide.into_iter().map(|v| v as f32).collect();
    Matrix::from_vec(a.rows(), b.cols, data).expect("product shape")
}

/// `a · b` left in 64 bits, row-major.
pub(crate) fn product_wide(a: &Matrix, b: &Packed) -> Vec<f64> {
    debug_assert_eq!(a.cols(), b.rows);
    let mut out = vec![0f64; a.rows() * b.cols];
    dispatch(a.data(), &b.data, a.rows(), a.cols(), b.cols, &mut out);
    out
}

fn dispatch(a: &[f32], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the feature was detected on this CPU.
            unsafe { product_avx512(a, b, m, k, n, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected on this CPU.
            unsafe { product_avx2(a, b, m, k, n, out) };
            return;
        }
    }
    product_body(a, b, m, k, n, out);
}

/// Baseline build of the kernel, exposed so tests can compare paths.
#[doc(hidden)]
pub fn product_generic(a: &Matrix, b: &Packed) -> Matrix {
    let mut out = vec![0f64; a.rows() * b.cols];
    product_body(a.data(), &b.data, a.rows(), a.cols(), b.cols, &mut out);
    let data = out.into_iter().map(|v| v as f32).collect();
    Matrix::from_vec(a.rows(), b.cols, data).expect("product shape")
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn product_avx512(a: &[f32], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    product_body(a, b, m, k, n, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn product_avx2(a: &[f32], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    product_body(a, b, m, k, n, out);
}

#[inline(always)]
fn product_body(a: &[f32], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let mut acc = vec![0f64; 4 * n];
    let mut i = 0;
    while i + 4 <= m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        {
            let (c0, rest) = acc.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            for p in 0..k {
                let br = &b[p * n..(p + 1) * n];
                let a0 = f64::from(a[i * k + p]);
                let a1 = f64::from(a[(i + 1) * k + p]);
                let a2 = f64::from(a[(i + 2) * k + p]);
                let a3 = f64::from(a[(i + 3) * k + p]);
                for ((((x0, x1), x2), x3), &bv) in c0
                    .iter_mut()
                    .zip(c1.iter_mut())
                    .zip(c2.iter_mut())
                    .zip(c3.iter_mut())
                    .zip(br)
                {
                    *x0 += a0 * bv;
                    *x1 += a1 * bv;
                    *x2 += a2 * bv;
                    *x3 += a3 * bv;
                }
            }
        }
        out[i * n..(i + 4) * n].copy_from_slice(&acc);
        i += 4;
    }
    let row_acc = &mut acc[..n];
    for r in i..m {
        row_acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let av = f64::from(a[r * k + p]);
            for (x, &bv) in row_acc.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *x += av * bv;
            }
        }
        out[r * n..(r + 1) * n].copy_from_slice(row_acc);
    }
}
