//! Direct 3D convolution, pooling, and upsampling kernels.
//!
//! Volumes are laid out channel-major, `[C, D, H, W]` row-major, so the
//! innermost x axis is contiguous. Convolution runs as im2col over one z
//! slice at a time followed by a register-blocked GEMM (`gemm_acc`): the
//! patch matrix has `C_in * k^3` rows of `H * W` contiguous columns, which
//! keeps every hot loop long and vectorizable. The backward passes reuse the
//! same machinery with the operands rearranged.

use alloc::vec;

use crate::gemm::{gemm_acc_strided, gemm_acc_strided_tall};
use crate::tensor::Real;

/// Pad patch-matrix rows by one cache line so their stride is not a
/// power-of-two multiple of 4 KiB (which would map every row to one L1 set).
const COL_PAD: usize = 16;

#[inline]
fn col_stride(hw: usize) -> usize {
    hw + COL_PAD
}

/// Spatial extents of one channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Extent3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Extent3 {
    pub fn voxels(self) -> usize {
        self.d * self.h * self.w
    }
}

/// Valid output range along one axis for a kernel offset `delta = tap - radius`:
/// indexes z with 0 <= z + delta < n.
#[inline]
fn axis_range(n: usize, delta: isize) -> (usize, usize) {
    let lo = if delta < 0 { (-delta) as usize } else { 0 };
    let hi = if delta > 0 {
        n.saturating_sub(delta as usize)
    } else {
        n
    };
    (lo, hi.max(lo))
}

/// Fills the patch matrix for one output slice: row `(c, tz, ty, tx)` holds
/// the input plane `z + tz - r` shifted by `(ty - r, tx - r)`, zero-padded.
fn im2col_slice<E: Real>(
    input: &[E],
    c_in: usize,
    ext: Extent3,
    k: usize,
    z: usize,
    col: &mut [E],
) {
    let (d, h, w) = (ext.d, ext.h, ext.w);
    let hw = h * w;
    let cs = col_stride(hw);
    let vox = ext.voxels();
    let radius = (k / 2) as isize;
    col.fill(E::ZERO);

    for c in 0..c_in {
        let in_ch = &input[c * vox..(c + 1) * vox];
        for tz in 0..k {
            let dz = tz as isize - radius;
            let sz = z as isize + dz;
            if sz < 0 || sz >= d as isize {
                continue;
            }
            let plane = &in_ch[(sz as usize) * hw..(sz as usize + 1) * hw];
            for ty in 0..k {
                let dy = ty as isize - radius;
                let (y_lo, y_hi) = axis_range(h, dy);
                for tx in 0..k {
                    let dx = tx as isize - radius;
                    let (x_lo, x_hi) = axis_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let row_base = (((c * k + tz as usize) * k + ty) * k + tx) * cs;
                    let len = x_hi - x_lo;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let src = sy * w + (x_lo as isize + dx) as usize;
                        col[row_base + y * w + x_lo..row_base + y * w + x_lo + len]
                            .copy_from_slice(&plane[src..src + len]);
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch-matrix gradient back into the input gradient: the
/// exact adjoint of `im2col_slice`.
fn col2im_add_slice<E: Real>(
    gcol: &[E],
    c_in: usize,
    ext: Extent3,
    k: usize,
    z: usize,
    grad_in: &mut [E],
) {
    let (d, h, w) = (ext.d, ext.h, ext.w);
    let hw = h * w;
    let cs = col_stride(hw);
    let vox = ext.voxels();
    let radius = (k / 2) as isize;

    for c in 0..c_in {
        let gin_ch = &mut grad_in[c * vox..(c + 1) * vox];
        for tz in 0..k {
            let dz = tz as isize - radius;
            let sz = z as isize + dz;
            if sz < 0 || sz >= d as isize {
                continue;
            }
            let plane = &mut gin_ch[(sz as usize) * hw..(sz as usize + 1) * hw];
            for ty in 0..k {
                let dy = ty as isize - radius;
                let (y_lo, y_hi) = axis_range(h, dy);
                for tx in 0..k {
                    let dx = tx as isize - radius;
                    let (x_lo, x_hi) = axis_range(w, dx);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let row_base = (((c * k + tz as usize) * k + ty) * k + tx) * cs;
                    let len = x_hi - x_lo;
                    for y in y_lo..y_hi {
                        let sy = (y as isize + dy) as usize;
                        let dst = sy * w + (x_lo as isize + dx) as usize;
                        let src = &gcol[row_base + y * w + x_lo..row_base + y * w + x_lo + len];
                        for (g, &v) in plane[dst..dst + len].iter_mut().zip(src) {
                            *g += v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded stride-1 3D convolution.
///
/// `input` is `[c_in, D, H, W]`, `weight` is `[c_out, c_in, k, k, k]` with odd
/// `k`, `bias` is `[c_out]`, and `out` must hold `c_out * D * H * W` elements.
pub fn conv3d_forward<E: Real>(
    input: &[E],
    c_in: usize,
    ext: Extent3,
    weight: &[E],
    bias: &[E],
    c_out: usize,
    k: usize,
    out: &mut [E],
) {
    debug_assert_eq!(k % 2, 1);
    debug_assert_eq!(input.len(), c_in * ext.voxels());
    debug_assert_eq!(weight.len(), c_out * c_in * k * k * k);
    debug_assert_eq!(out.len(), c_out * ext.voxels());

    let hw = ext.h * ext.w;
    let cs = col_stride(hw);
    let vox = ext.voxels();
    let kc = c_in * k * k * k;
    let mut col = vec![E::ZERO; kc * cs];
    let mut out_slice = vec![E::ZERO; c_out * cs];

    for z in 0..ext.d {
        im2col_slice(input, c_in, ext, k, z, &mut col);
        for o in 0..c_out {
            out_slice[o * cs..o * cs + hw].fill(bias[o]);
        }
        // weight is already the row-major [c_out, kc] matrix.
        gemm_acc_strided(&mut out_slice, cs, weight, kc, &col, cs, c_out, kc, hw);
        for o in 0..c_out {
            out[o * vox + z * hw..o * vox + (z + 1) * hw]
                .copy_from_slice(&out_slice[o * cs..o * cs + hw]);
        }
    }
}

fn gather_gout_slice<E: Real>(
    grad_out: &[E],
    c_out: usize,
    vox: usize,
    hw: usize,
    z: usize,
    gout_slice: &mut [E],
) {
    let cs = col_stride(hw);
    for o in 0..c_out {
        gout_slice[o * cs..o * cs + hw]
            .copy_from_slice(&grad_out[o * vox + z * hw..o * vox + (z + 1) * hw]);
    }
}

/// Accumulates `d(loss)/d(input)` given the upstream gradient.
pub fn conv3d_backward_input<E: Real>(
    grad_out: &[E],
    c_out: usize,
    ext: Extent3,
    weight: &[E],
    c_in: usize,
    k: usize,
    grad_in: &mut [E],
) {
    let hw = ext.h * ext.w;
    let cs = col_stride(hw);
    let vox = ext.voxels();
    let kc = c_in * k * k * k;

    // Transposed weight matrix [kc, c_out].
    let mut w_t = vec![E::ZERO; kc * c_out];
    for o in 0..c_out {
        for p in 0..kc {
            w_t[p * c_out + o] = weight[o * kc + p];
        }
    }

    let mut gout_slice = vec![E::ZERO; c_out * cs];
    let mut gcol = vec![E::ZERO; kc * cs];
    for z in 0..ext.d {
        gather_gout_slice(grad_out, c_out, vox, hw, z, &mut gout_slice);
        gcol.fill(E::ZERO);
        gemm_acc_strided(&mut gcol, cs, &w_t, c_out, &gout_slice, cs, kc, c_out, hw);
        col2im_add_slice(&gcol, c_in, ext, k, z, grad_in);
    }
}

/// Accumulates `d(loss)/d(weight)` and `d(loss)/d(bias)`.
pub fn conv3d_backward_params<E: Real>(
    grad_out: &[E],
    c_out: usize,
    ext: Extent3,
    input: &[E],
    c_in: usize,
    k: usize,
    grad_weight: &mut [E],
    grad_bias: &mut [E],
) {
    let hw = ext.h * ext.w;
    let cs = col_stride(hw);
    let vox = ext.voxels();
    let kc = c_in * k * k * k;
    let kcs = kc + COL_PAD;

    let mut col = vec![E::ZERO; kc * cs];
    // col transposed per slice, [hw, kc] with padded rows, so the weight
    // gradient GEMM runs with a wide n dimension.
    let mut col_t = vec![E::ZERO; hw * kcs];
    let mut gout_slice = vec![E::ZERO; c_out * cs];

    for z in 0..ext.d {
        im2col_slice(input, c_in, ext, k, z, &mut col);
        transpose_blocked(&col, cs, kc, hw, &mut col_t, kcs);
        gather_gout_slice(grad_out, c_out, vox, hw, z, &mut gout_slice);
        for o in 0..c_out {
            let mut acc = E::ZERO;
            for &g in &gout_slice[o * cs..o * cs + hw] {
                acc += g;
            }
            grad_bias[o] += acc;
        }
        // gW[o, (c,tap)] += gout_row_o . col_row: A = gout [c_out, hw],
        // B = col_t [hw, kc]. The tall tiling cuts passes over col_t.
        gemm_acc_strided_tall(
            grad_weight,
            kc,
            &gout_slice,
            cs,
            &col_t,
            kcs,
            c_out,
            hw,
            kc,
        );
    }
}

/// Blocked transpose: `dst[j, i] = src[i, j]` for an `rows x cols` source,
/// both with padded row strides. 16x16 blocks keep reads and writes inside
/// a few cache sets.
fn transpose_blocked<E: Real>(
    src: &[E],
    src_stride: usize,
    rows: usize,
    cols: usize,
    dst: &mut [E],
    dst_stride: usize,
) {
    const B: usize = 16;
    let mut r0 = 0;
    while r0 < rows {
        let r_lim = (rows - r0).min(B);
        let mut c0 = 0;
        while c0 < cols {
            let c_lim = (cols - c0).min(B);
            if r_lim == B {
                // Full-height block: each destination row is one contiguous
                // 16-wide store fed by fixed-stride loads.
                for c in 0..c_lim {
                    let base = r0 * src_stride + c0 + c;
                    let dst_row = &mut dst[(c0 + c) * dst_stride + r0..(c0 + c) * dst_stride + r0 + B];
                    for (r, slot) in dst_row.iter_mut().enumerate() {
                        *slot = src[base + r * src_stride];
                    }
                }
            } else {
                for r in 0..r_lim {
                    let src_row =
                        &src[(r0 + r) * src_stride + c0..(r0 + r) * src_stride + c0 + c_lim];
                    for (c, &v) in src_row.iter().enumerate() {
                        dst[(c0 + c) * dst_stride + r0 + r] = v;
                    }
                }
            }
            c0 += B;
        }
        r0 += B;
    }
}

/// 2x2x2 max pooling with stride 2. Returns the per-output argmax as flat
/// indices into `input` so the backward pass can route gradients. Ties go to
/// the lowest linear offset.
pub fn maxpool3d_forward<E: Real>(
    input: &[E],
    channels: usize,
    ext: Extent3,
    out: &mut [E],
    argmax: &mut [u32],
) {
    let (d, h, w) = (ext.d, ext.h, ext.w);
    debug_assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let in_vox = ext.voxels();
    let out_vox = od * oh * ow;

    for c in 0..channels {
        let in_ch = &input[c * in_vox..(c + 1) * in_vox];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best_idx = ((2 * z * h + 2 * y) * w + 2 * x) as u32;
                    let mut best = in_ch[best_idx as usize];
                    // Scan in increasing linear offset so strict > keeps the
                    // first (lowest-offset) maximum.
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx;
                                let v = in_ch[idx];
                                if v > best {
                                    best = v;
                                    best_idx = idx as u32;
                                }
                            }
                        }
                    }
                    let o_idx = (z * oh + y) * ow + x;
                    out[c * out_vox + o_idx] = best;
                    argmax[c * out_vox + o_idx] = (c * in_vox) as u32 + best_idx;
                }
            }
        }
    }
}

pub fn maxpool3d_backward<E: Real>(grad_out: &[E], argmax: &[u32], grad_in: &mut [E]) {
    for (g, &src) in grad_out.iter().zip(argmax) {
        grad_in[src as usize] += *g;
    }
}

/// Nearest-neighbour upsampling by 2 along each spatial axis.
pub fn upsample3d_forward<E: Real>(input: &[E], channels: usize, ext: Extent3, out: &mut [E]) {
    let (d, h, w) = (ext.d, ext.h, ext.w);
    let in_vox = ext.voxels();
    let out_vox = 8 * in_vox;
    let (oh, ow) = (2 * h, 2 * w);

    for c in 0..channels {
        let in_ch = &input[c * in_vox..(c + 1) * in_vox];
        let out_ch = &mut out[c * out_vox..(c + 1) * out_vox];
        for z in 0..2 * d {
            let sz = z / 2;
            for y in 0..oh {
                let sy = y / 2;
                let in_row = &in_ch[(sz * h + sy) * w..(sz * h + sy) * w + w];
                let out_row = &mut out_ch[(z * oh + y) * ow..(z * oh + y) * ow + ow];
                for (i, v) in in_row.iter().enumerate() {
                    out_row[2 * i] = *v;
                    out_row[2 * i + 1] = *v;
                }
            }
        }
    }
}

/// Each source voxel fans out to a 2x2x2 block, so its gradient is the sum of
/// the eight upstream gradients.
pub fn upsample3d_backward<E: Real>(
    grad_out: &[E],
    channels: usize,
    in_ext: Extent3,
    grad_in: &mut [E],
) {
    let (d, h, w) = (in_ext.d, in_ext.h, in_ext.w);
    let in_vox = in_ext.voxels();
    let out_vox = 8 * in_vox;
    let (oh, ow) = (2 * h, 2 * w);

    for c in 0..channels {
        let gout_ch = &grad_out[c * out_vox..(c + 1) * out_vox];
        let gin_ch = &mut grad_in[c * in_vox..(c + 1) * in_vox];
        for z in 0..2 * d {
            let sz = z / 2;
            for y in 0..oh {
                let sy = y / 2;
                let gout_row = &gout_ch[(z * oh + y) * ow..(z * oh + y) * ow + ow];
                let gin_row = &mut gin_ch[(sz * h + sy) * w..(sz * h + sy) * w + w];
                for (i, g) in gin_row.iter_mut().enumerate() {
                    *g += gout_row[2 * i] + gout_row[2 * i + 1];
                }
            }
        }
    }
}

/// 2x2x2 average pooling with stride 2 (token reduction before attention).
pub fn avgpool3d_forward<E: Real>(input: &[E], channels: usize, ext: Extent3, out: &mut [E]) {
    let (d, h, w) = (ext.d, ext.h, ext.w);
    debug_assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let in_vox = ext.voxels();
    let out_vox = od * oh * ow;
    let inv8 = E::from_f64(0.125);

    for c in 0..channels {
        let in_ch = &input[c * in_vox..(c + 1) * in_vox];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let mut sum = E::ZERO;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                sum += in_ch[((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx];
                            }
                        }
                    }
                    out[c * out_vox + (z * oh + y) * ow + x] = sum * inv8;
                }
            }
        }
    }
}

pub fn avgpool3d_backward<E: Real>(
    grad_out: &[E],
    channels: usize,
    in_ext: Extent3,
    grad_in: &mut [E],
) {
    let (d, h, w) = (in_ext.d, in_ext.h, in_ext.w);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let in_vox = in_ext.voxels();
    let out_vox = od * oh * ow;
    let inv8 = E::from_f64(0.125);

    for c in 0..channels {
        let gout_ch = &grad_out[c * out_vox..(c + 1) * out_vox];
        let gin_ch = &mut grad_in[c * in_vox..(c + 1) * in_vox];
        for z in 0..od {
            for y in 0..oh {
                for x in 0..ow {
                    let g = gout_ch[(z * oh + y) * ow + x] * inv8;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                gin_ch[((2 * z + dz) * h + 2 * y + dy) * w + 2 * x + dx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}
