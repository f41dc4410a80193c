//! Dense 2D kernels backing the attention path: matmul, transpose, and
//! numerically stable row softmax.

use crate::tensor::Real;

/// `out = a (m x k) * b (k x n)`, row-major, accumulated in-place over rows so
/// the inner loop runs along contiguous memory of both `b` and `out`.
pub fn matmul<E: Real>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(E::ZERO);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * *bv;
            }
        }
    }
}

pub fn transpose<E: Real>(a: &[E], rows: usize, cols: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Softmax over each row of an `rows x cols` matrix, shifted by the row max.
pub fn row_softmax<E: Real>(input: &[E], rows: usize, cols: usize, out: &mut [E]) {
    for r in 0..rows {
        let row = &input[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row {
            max = max.maximum(v);
        }
        let mut sum = E::ZERO;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        let inv = E::ONE / sum;
        for o in out_row.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// Backward of row softmax given its own output: for each row,
/// `g_in = s * (g_out - dot(g_out, s))`.
pub fn row_softmax_backward<E: Real>(
    softmax_out: &[E],
    grad_out: &[E],
    rows: usize,
    cols: usize,
    grad_in: &mut [E],
) {
    for r in 0..rows {
        let s = &softmax_out[r * cols..(r + 1) * cols];
        let g = &grad_out[r * cols..(r + 1) * cols];
        let gi = &mut grad_in[r * cols..(r + 1) * cols];
        let mut dot = E::ZERO;
        for (sv, gv) in s.iter().zip(g) {
            dot += *sv * *gv;
        }
        for ((o, sv), gv) in gi.iter_mut().zip(s).zip(g) {
            *o += *sv * (*gv - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_small_case() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let a = vec![1.0f64, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        let mut out = vec![0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut t = vec![0.0; 6];
        transpose(&a, 2, 3, &mut t);
        assert_eq!(t, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let mut back = vec![0.0; 6];
        transpose(&t, 3, 2, &mut back);
        assert_eq!(back, a);
    }

    #[test]
    fn row_softmax_rows_sum_to_one() {
        let x = vec![0.0f64, (3.0f64).ln(), 1.0, 1.0];
        let mut s = vec![0.0; 4];
        row_softmax(&x, 2, 2, &mut s);
        assert!((s[0] - 0.25).abs() < 1e-12);
        assert!((s[1] - 0.75).abs() < 1e-12);
        assert!((s[2] - 0.5).abs() < 1e-12);
        assert!((s[3] - 0.5).abs() < 1e-12);
    }
}
