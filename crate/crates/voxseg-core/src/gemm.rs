//! Register-blocked dense matrix multiply used by the convolution kernels.
//!
//! `C += A * B` with row-major operands and explicit row strides, so callers
//! can pad rows away from power-of-two byte strides (a 4 KiB row stride puts
//! every row in the same L1 set and serializes the inner loops). Work
//! proceeds over MR x W stack tiles; the tile width W is monomorphized
//! (64/32/16/8/4/1) so the accumulator loops have constant bounds and
//! autovectorize into wide FMA sequences.

use crate::tensor::Real;

const MR: usize = 4;

/// `C[m x n] += A[m x k] * B[k x n]` with dense rows.
pub fn gemm_acc<E: Real>(c: &mut [E], a: &[E], b: &[E], m: usize, k: usize, n: usize) {
    gemm_acc_strided(c, n, a, k, b, n, m, k, n);
}

/// `C[m x n] += A[m x k] * B[k x n]` where each operand's rows are laid out
/// `stride` elements apart (stride >= logical width).
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc_strided<E: Real>(
    c: &mut [E],
    c_stride: usize,
    a: &[E],
    a_stride: usize,
    b: &[E],
    b_stride: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert!(a_stride >= k && b_stride >= n && c_stride >= n);
    debug_assert!(a.len() >= (m - 1) * a_stride + k);
    debug_assert!(b.len() >= (k - 1) * b_stride + n);
    debug_assert!(c.len() >= (m - 1) * c_stride + n);

    let mut i0 = 0;
    while i0 < m {
        let i_lim = (m - i0).min(MR);
        let mut j0 = 0;
        while j0 < n {
            let rem = n - j0;
            if rem >= 64 {
                tile::<64, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, i_lim);
                j0 += 64;
            } else if rem >= 32 {
                tile::<32, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, i_lim);
                j0 += 32;
            } else if rem >= 16 {
                tile::<16, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, i_lim);
                j0 += 16;
            } else if rem >= 8 {
                tile::<8, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, i_lim);
                j0 += 8;
            } else if rem >= 4 {
                tile::<4, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, i_lim);
                j0 += 4;
            } else {
                tile::<1, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, i_lim);
                j0 += 1;
            }
        }
        i0 += MR;
    }
}

/// Variant tuned for short-and-wide products (m small, k large): 16-row
/// tiles quarter the number of passes over the streamed B panel.
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc_strided_tall<E: Real>(
    c: &mut [E],
    c_stride: usize,
    a: &[E],
    a_stride: usize,
    b: &[E],
    b_stride: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    if m % 16 != 0 {
        return gemm_acc_strided(c, c_stride, a, a_stride, b, b_stride, m, k, n);
    }
    let mut i0 = 0;
    while i0 < m {
        let mut j0 = 0;
        while j0 < n {
            let rem = n - j0;
            if rem >= 16 {
                tile16x16::<E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0);
                j0 += 16;
            } else {
                // Delegate the ragged right edge to the generic tiles.
                for step in [8usize, 4, 1] {
                    while n - j0 >= step {
                        match step {
                            8 => tile::<8, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, 4),
                            4 => tile::<4, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, 4),
                            _ => tile::<1, E>(c, c_stride, a, a_stride, b, b_stride, k, i0, j0, 4),
                        }
                        for ii in [4usize, 8, 12] {
                            match step {
                                8 => tile::<8, E>(c, c_stride, a, a_stride, b, b_stride, k, i0 + ii, j0, 4),
                                4 => tile::<4, E>(c, c_stride, a, a_stride, b, b_stride, k, i0 + ii, j0, 4),
                                _ => tile::<1, E>(c, c_stride, a, a_stride, b, b_stride, k, i0 + ii, j0, 4),
                            }
                        }
                        j0 += step;
                    }
                }
            }
        }
        i0 += 16;
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn tile16x16<E: Real>(
    c: &mut [E],
    c_stride: usize,
    a: &[E],
    a_stride: usize,
    b: &[E],
    b_stride: usize,
    k: usize,
    i0: usize,
    j0: usize,
) {
    let mut acc = [[E::ZERO; 16]; 16];
    for p in 0..k {
        let b_row: &[E; 16] = b[p * b_stride + j0..p * b_stride + j0 + 16]
            .try_into()
            .unwrap();
        for (ii, acc_row) in acc.iter_mut().enumerate() {
            let av = a[(i0 + ii) * a_stride + p];
            for (x, &bv) in acc_row.iter_mut().zip(b_row) {
                *x += av * bv;
            }
        }
    }
    for (ii, acc_row) in acc.iter().enumerate() {
        let c_row = &mut c[(i0 + ii) * c_stride + j0..(i0 + ii) * c_stride + j0 + 16];
        for (cv, &av) in c_row.iter_mut().zip(acc_row) {
            *cv += av;
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn tile<const W: usize, E: Real>(
    c: &mut [E],
    c_stride: usize,
    a: &[E],
    a_stride: usize,
    b: &[E],
    b_stride: usize,
    k: usize,
    i0: usize,
    j0: usize,
    i_lim: usize,
) {
    let mut acc = [[E::ZERO; W]; MR];
    if i_lim == MR {
        for p in 0..k {
            let b_row: &[E; W] = b[p * b_stride + j0..p * b_stride + j0 + W]
                .try_into()
                .unwrap();
            let a_col = [
                a[i0 * a_stride + p],
                a[(i0 + 1) * a_stride + p],
                a[(i0 + 2) * a_stride + p],
                a[(i0 + 3) * a_stride + p],
            ];
            for (acc_row, &av) in acc.iter_mut().zip(&a_col) {
                for (x, &bv) in acc_row.iter_mut().zip(b_row) {
                    *x += av * bv;
                }
            }
        }
    } else {
        for p in 0..k {
            let b_row: &[E; W] = b[p * b_stride + j0..p * b_stride + j0 + W]
                .try_into()
                .unwrap();
            for ii in 0..i_lim {
                let av = a[(i0 + ii) * a_stride + p];
                for (x, &bv) in acc[ii].iter_mut().zip(b_row) {
                    *x += av * bv;
                }
            }
        }
    }
    for (ii, acc_row) in acc.iter().enumerate().take(i_lim) {
        let c_row = &mut c[(i0 + ii) * c_stride + j0..(i0 + ii) * c_stride + j0 + W];
        for (cv, &av) in c_row.iter_mut().zip(acc_row) {
            *cv += av;
        }
    }
}
