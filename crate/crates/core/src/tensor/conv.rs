//! im2col convolution kernels.
//!
//! Every output element is accumulated from zero over the reduction index in
//! ascending order (channel, kernel row, kernel column), then the bias is
//! added. This is the same order as a direct nested-loop convolution, so both
//! agree bit for bit.

use rayon::prelude::*;

use super::Scalar;
use crate::error::{Error, Result};

/// Images per partial weight-gradient sum. Fixed so results do not depend on
/// the number of worker threads.
const GRAD_IMAGE_CHUNK: usize = 8;
const ROW_BLOCK: usize = 4;
const COL_BLOCK: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[batch, in_channels, height, width] = input else {
            return Err(Error::Dimension(format!(
                "conv2d input must be N x C x H x W, got {input:?}"
            )));
        };
        let &[out_channels, w_channels, kernel_h, kernel_w] = weight else {
            return Err(Error::Dimension(format!(
                "conv2d weight must be O x C x kh x kw, got {weight:?}"
            )));
        };
        if w_channels != in_channels {
            return Err(Error::Dimension(format!(
                "conv2d input has {in_channels} channels but weight expects {w_channels}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        let out_dim = |size: usize, k: usize| -> Result<usize> {
            let span = size + 2 * padding;
            if span < k {
                return Err(Error::Config(format!(
                    "conv2d kernel {k} does not fit input {size} with padding {padding}"
                )));
            }
            Ok((span - k) / stride + 1)
        };
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: out_dim(height, kernel_h)?,
            out_w: out_dim(width, kernel_w)?,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn reduce_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `out (m x n) += a (m x k) * b (k x n)`, each output summed in ascending `k`.
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        unsafe { matmul_avx2(a, b, out, m, k, n) };
        return;
    }
    matmul_tiles(a, b, out, m, k, n);
}

// Wider vectors only; no fused multiply-add, so rounding is unchanged.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_avx2<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    matmul_tiles(a, b, out, m, k, n);
}

#[inline(always)]
fn matmul_tiles<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    // column panels outermost so a k x COL_BLOCK slice of b stays in cache
    for c0 in (0..n).step_by(COL_BLOCK) {
        let cols = COL_BLOCK.min(n - c0);
        for r0 in (0..m).step_by(ROW_BLOCK) {
            let rows = ROW_BLOCK.min(m - r0);
            if rows == ROW_BLOCK && cols == COL_BLOCK {
                full_tile(a, b, out, r0, c0, k, n);
                continue;
            }
            let mut acc = [[T::zero(); COL_BLOCK]; ROW_BLOCK];
            for r in 0..rows {
                acc[r][..cols].copy_from_slice(&out[(r0 + r) * n + c0..][..cols]);
            }
            for kk in 0..k {
                let b_row = &b[kk * n + c0..][..cols];
                for r in 0..rows {
                    let av = a[(r0 + r) * k + kk];
                    for (dst, &bv) in acc[r][..cols].iter_mut().zip(b_row) {
                        *dst += av * bv;
                    }
                }
            }
            for r in 0..rows {
                out[(r0 + r) * n + c0..][..cols].copy_from_slice(&acc[r][..cols]);
            }
        }
    }
}

#[inline(always)]
fn full_tile<T: Scalar>(a: &[T], b: &[T], out: &mut [T], r0: usize, c0: usize, k: usize, n: usize) {
    let mut acc = [[T::zero(); COL_BLOCK]; ROW_BLOCK];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&out[(r0 + r) * n + c0..][..COL_BLOCK]);
    }
    let a_rows: [&[T]; ROW_BLOCK] = std::array::from_fn(|r| &a[(r0 + r) * k..][..k]);
    for kk in 0..k {
        let b_row: &[T; COL_BLOCK] = b[kk * n + c0..][..COL_BLOCK].try_into().unwrap();
        for r in 0..ROW_BLOCK {
            let av = a_rows[r][kk];
            for j in 0..COL_BLOCK {
                acc[r][j] += av * b_row[j];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        out[(r0 + r) * n + c0..][..COL_BLOCK].copy_from_slice(row);
    }
}

pub(crate) fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

/// Unfolds one image into a `(C*kh*kw) x (out_h*out_w)` matrix, zeros for padding.
fn im2col<T: Scalar>(image: &[T], g: &Conv2dGeometry, col: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.height {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix as usize >= g.width {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Folds a column matrix back onto an image, adding overlapping contributions.
fn col2im_add<T: Scalar>(col: &[T], g: &Conv2dGeometry, image: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let chan = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn with_columns<T: Scalar, R>(image: &[T], g: &Conv2dGeometry, f: impl FnOnce(&[T]) -> R) -> R {
    if g.is_pointwise() {
        f(image)
    } else {
        let mut col = vec![T::zero(); g.reduce_len() * g.out_plane()];
        im2col(image, g, &mut col);
        f(&col)
    }
}

/// Cross-correlation of `input` with `weight` plus optional per-channel bias.
pub fn conv2d_forward<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, g: &Conv2dGeometry) -> Vec<T> {
    let plane = g.out_plane();
    let out_image = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_image];
    out.par_chunks_mut(out_image)
        .zip(input.par_chunks(g.in_image()))
        .for_each(|(dst, image)| {
            with_columns(image, g, |col| {
                matmul_acc(weight, col, dst, g.out_channels, g.reduce_len(), plane)
            });
            if let Some(bias) = bias {
                for (o, &b) in bias.iter().enumerate() {
                    dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += b);
                }
            }
        });
    out
}

pub(crate) struct Conv2dGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &Conv2dGeometry,
    needs: [bool; 3],
) -> Conv2dGrads<T> {
    let plane = g.out_plane();
    let out_image = g.out_channels * plane;
    let k = g.reduce_len();

    let grad_input = needs[0].then(|| {
        let weight_t = transpose(weight, g.out_channels, k);
        let mut gx = vec![T::zero(); input.len()];
        gx.par_chunks_mut(g.in_image())
            .zip(grad_out.par_chunks(out_image))
            .for_each(|(gx_img, gout)| {
                let mut gcol = vec![T::zero(); k * plane];
                matmul_acc(&weight_t, gout, &mut gcol, k, g.out_channels, plane);
                if g.is_pointwise() {
                    gx_img.copy_from_slice(&gcol);
                } else {
                    col2im_add(&gcol, g, gx_img);
                }
            });
        gx
    });

    let grad_weight = needs[1].then(|| {
        let partials: Vec<Vec<T>> = input
            .par_chunks(g.in_image() * GRAD_IMAGE_CHUNK)
            .zip(grad_out.par_chunks(out_image * GRAD_IMAGE_CHUNK))
            .map(|(images, gouts)| {
                let mut gw = vec![T::zero(); g.out_channels * k];
                for (image, gout) in images.chunks(g.in_image()).zip(gouts.chunks(out_image)) {
                    with_columns(image, g, |col| {
                        let col_t = transpose(col, k, plane);
                        matmul_acc(gout, &col_t, &mut gw, g.out_channels, plane, k);
                    });
                }
                gw
            })
            .collect();
        let mut total = vec![T::zero(); g.out_channels * k];
        for part in &partials {
            total.iter_mut().zip(part).for_each(|(a, &b)| *a += b);
        }
        total
    });

    let grad_bias = needs[2].then(|| {
        let mut gb = vec![T::zero(); g.out_channels];
        for gout in grad_out.chunks(out_image) {
            for (o, acc) in gb.iter_mut().enumerate() {
                for &v in &gout[o * plane..(o + 1) * plane] {
                    *acc += v;
                }
            }
        }
        gb
    });

    Conv2dGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}
