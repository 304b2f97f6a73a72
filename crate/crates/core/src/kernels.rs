//! Raw numeric kernels behind the graph operations.
//!
//! Convolutions lower to im2col + GEMM over fixed row chunks. The chunking
//! depends only on tensor shapes, and partial results are reduced in chunk
//! order, so outputs do not depend on how many worker threads run.

use rayon::prelude::*;

use crate::error::{dim_err, LaffError, Result};
use crate::tensor::Scalar;

/// Target number of output pixels per im2col chunk.
const CHUNK_PIXELS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: isize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: [usize; 4], weight: [usize; 4], pad: isize) -> Result<Self> {
        let [batch, cin, h, w] = input;
        let [cout, wcin, kh, kw] = weight;
        if kh != kw {
            return Err(LaffError::Config(format!("kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(LaffError::Config(format!("kernel size must be odd, got {kh}")));
        }
        if wcin != cin {
            return Err(dim_err!(
                "conv weight expects {wcin} input channels, input has {cin}"
            ));
        }
        let k = kh as isize;
        let ho = h as isize + 2 * pad - k + 1;
        let wo = w as isize + 2 * pad - k + 1;
        if ho < 1 || wo < 1 {
            return Err(dim_err!(
                "conv output would be empty: input {h}x{w}, kernel {kh}, padding {pad}"
            ));
        }
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            k: kh,
            pad,
            ho: ho as usize,
            wo: wo as usize,
        })
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn rows_per_chunk(&self) -> usize {
        CHUNK_PIXELS.div_ceil(self.wo).clamp(1, self.ho)
    }

    /// `(batch, first row, row count)` for every chunk, in reduction order.
    fn tasks(&self) -> Vec<(usize, usize, usize)> {
        let rows = self.rows_per_chunk();
        let mut out = Vec::new();
        for b in 0..self.batch {
            let mut y0 = 0;
            while y0 < self.ho {
                let n = rows.min(self.ho - y0);
                out.push((b, y0, n));
                y0 += n;
            }
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }
}

/// Row stride of an im2col buffer holding `p` pixels per row. The extra cache
/// line keeps consecutive rows out of the same L1 set when `p` is a multiple
/// of 1024.
fn col_stride(p: usize) -> usize {
    p.next_multiple_of(16) + 16
}

/// Fills `col` (`patch_len` rows of `rows*wo` pixels, row stride
/// [`col_stride`]) for output rows `y0..y0+rows`.
fn im2col<T: Scalar>(input: &[T], g: &ConvGeom, b: usize, y0: usize, rows: usize, col: &mut [T]) {
    let k = g.k;
    let p = rows * g.wo;
    let ld = col_stride(p);
    let plane = g.h * g.w;
    let base = b * g.cin * plane;
    for c in 0..g.cin {
        let chan = &input[base + c * plane..base + (c + 1) * plane];
        for i in 0..k {
            for j in 0..k {
                let row = (c * k + i) * k + j;
                let dst = &mut col[row * ld..row * ld + p];
                let dx = j as isize - g.pad;
                // valid x range: 0 <= x + dx < w
                let x_lo = (-dx).clamp(0, g.wo as isize) as usize;
                let x_hi = (g.w as isize - dx).clamp(0, g.wo as isize) as usize;
                for r in 0..rows {
                    let out_row = &mut dst[r * g.wo..(r + 1) * g.wo];
                    let iy = (y0 + r) as isize + i as isize - g.pad;
                    if iy < 0 || iy >= g.h as isize || x_lo >= x_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    let src_start = iy as usize * g.w + (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&chan[src_start..src_start + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Raw output pointer shared by tasks that write disjoint regions.
#[derive(Clone, Copy)]
struct OutPtr<T>(*mut T);

// SAFETY: every task writes a disjoint set of rows (see `conv2d`).
unsafe impl<T> Send for OutPtr<T> {}
unsafe impl<T> Sync for OutPtr<T> {}

/// Grows (never shrinks) a reusable scratch buffer. im2col writes every
/// pixel the GEMMs read; the row padding is never read.
fn scratch<T: Scalar>(buf: &mut Vec<T>, len: usize) -> &mut [T] {
    if buf.len() < len {
        buf.resize(len, T::zero());
    }
    &mut buf[..len]
}

/// Cross-correlation with zero fill outside the input. `pad` may be negative
/// (crops), which the input-gradient path relies on.
pub(crate) fn conv2d<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let kp = g.patch_len();
    let out_plane = g.ho * g.wo;
    let mut output = vec![T::zero(); g.batch * g.cout * out_plane];
    let dst = OutPtr(output.as_mut_ptr());
    g.tasks().into_par_iter().for_each_init(Vec::new, |col, (b, y0, rows)| {
        let dst = dst;
        let p = rows * g.wo;
        let plane = g.h * g.w;
        // Task (b, y0) owns pixels y0*wo .. y0*wo+p of every output plane of image b.
        let c = unsafe { dst.0.add(b * g.cout * out_plane + y0 * g.wo) };
        let (src, rsb) = if g.is_pointwise() {
            (input[b * g.cin * plane + y0 * g.w..].as_ptr(), plane)
        } else {
            let col = scratch(col, kp * col_stride(p));
            im2col(input, g, b, y0, rows, col);
            (col.as_ptr() as *const T, col_stride(p))
        };
        // SAFETY: weight is cout x kp row-major, src is kp x p with row
        // stride rsb, and c addresses cout rows of p pixels strided by the
        // output plane. beta = 0, so c is never read.
        unsafe {
            T::gemm(
                g.cout, kp, p, T::one(),
                weight.as_ptr(), kp as isize, 1,
                src, rsb as isize, 1,
                T::zero(), c, out_plane as isize, 1,
            );
            if let Some(bias) = bias {
                for (o, &bo) in bias.iter().enumerate() {
                    let row = std::slice::from_raw_parts_mut(c.add(o * out_plane), p);
                    row.iter_mut().for_each(|v| *v = *v + bo);
                }
            }
        }
    });
    output
}

/// Gradient of the conv weight and bias given the upstream gradient.
pub(crate) fn conv2d_weight_grad<T: Scalar>(
    input: &[T],
    upstream: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let kp = g.patch_len();
    let out_plane = g.ho * g.wo;
    let partials: Vec<Vec<T>> = g
        .tasks()
        .into_par_iter()
        .map_init(Vec::new, |col, (b, y0, rows)| {
            let p = rows * g.wo;
            let mut dw = vec![T::zero(); g.cout * kp];
            let up = &upstream[b * g.cout * out_plane + y0 * g.wo..];
            let plane = g.h * g.w;
            // dW[o, q] = sum_p up[o, p] * col[q, p]
            let (src, ld) = if g.is_pointwise() {
                (input[b * g.cin * plane + y0 * g.w..].as_ptr(), plane)
            } else {
                let col = scratch(col, kp * col_stride(p));
                im2col(input, g, b, y0, rows, col);
                (col.as_ptr() as *const T, col_stride(p))
            };
            // SAFETY: `up` holds cout rows of p pixels strided by the output
            // plane; src holds kp rows of p pixels with stride ld.
            unsafe {
                T::gemm(
                    g.cout, p, kp, T::one(),
                    up.as_ptr(), out_plane as isize, 1,
                    src, 1, ld as isize,
                    T::zero(), dw.as_mut_ptr(), kp as isize, 1,
                );
            }
            dw
        })
        .collect();

    let mut dw = vec![T::zero(); g.cout * kp];
    for part in partials {
        for (a, b) in dw.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for (o, acc) in db.iter_mut().enumerate() {
            let start = (b * g.cout + o) * out_plane;
            *acc = upstream[start..start + out_plane]
                .iter()
                .fold(*acc, |s, &v| s + v);
        }
    }
    (dw, db)
}

/// Gradient w.r.t. the conv input: a correlation of the upstream gradient
/// with the spatially flipped, channel-transposed kernel.
pub(crate) fn conv2d_input_grad<T: Scalar>(weight: &[T], upstream: &[T], g: &ConvGeom) -> Vec<T> {
    let k = g.k;
    let mut flipped = vec![T::zero(); weight.len()];
    for o in 0..g.cout {
        for c in 0..g.cin {
            for i in 0..k {
                for j in 0..k {
                    let src = ((o * g.cin + c) * k + i) * k + j;
                    let dst = ((c * g.cout + o) * k + (k - 1 - i)) * k + (k - 1 - j);
                    flipped[dst] = weight[src];
                }
            }
        }
    }
    let back = ConvGeom {
        batch: g.batch,
        cin: g.cout,
        h: g.ho,
        w: g.wo,
        cout: g.cin,
        k,
        pad: k as isize - 1 - g.pad,
        ho: g.h,
        wo: g.w,
    };
    conv2d(upstream, &flipped, None, &back)
}

pub(crate) fn linear<T: Scalar>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    cin: usize,
    cout: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * cout];
    for b in 0..batch {
        let x = &input[b * cin..(b + 1) * cin];
        for o in 0..cout {
            let w = &weight[o * cin..(o + 1) * cin];
            let mut acc = bias.map_or(T::zero(), |bias| bias[o]);
            for (&xi, &wi) in x.iter().zip(w) {
                acc = acc + xi * wi;
            }
            out[b * cout + o] = acc;
        }
    }
    out
}

/// Returns `(max values, flat argmax within each plane)`; ties keep the first
/// index in row-major order.
pub(crate) fn global_max_pool<T: Scalar>(input: &[T], planes: usize, plane: usize) -> (Vec<T>, Vec<usize>) {
    let mut vals = Vec::with_capacity(planes);
    let mut idx = Vec::with_capacity(planes);
    for pl in input.chunks(plane).take(planes) {
        let (mut best_i, mut best) = (0, pl[0]);
        for (i, &v) in pl.iter().enumerate().skip(1) {
            if v > best {
                best = v;
                best_i = i;
            }
        }
        vals.push(best);
        idx.push(best_i);
    }
    (vals, idx)
}

/// Separable "valid" correlation of every plane with `taps` along both axes.
pub(crate) fn blur_valid<T: Scalar>(input: &[T], planes: usize, h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let n = taps.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut out = vec![T::zero(); planes * ho * wo];
    let mut tmp = vec![T::zero(); h * wo];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for x in 0..wo {
                let mut acc = T::zero();
                for (t, &g) in taps.iter().enumerate() {
                    acc = acc + g * row[x + t];
                }
                tmp[y * wo + x] = acc;
            }
        }
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let mut acc = T::zero();
                for (t, &g) in taps.iter().enumerate() {
                    acc = acc + g * tmp[(y + t) * wo + x];
                }
                dst[y * wo + x] = acc;
            }
        }
    }
    out
}

pub(crate) fn blur_valid_grad<T: Scalar>(upstream: &[T], planes: usize, h: usize, w: usize, taps: &[T]) -> Vec<T> {
    let n = taps.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut grad = vec![T::zero(); planes * h * w];
    let mut tmp = vec![T::zero(); h * wo];
    for p in 0..planes {
        tmp.fill(T::zero());
        let up = &upstream[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let u = up[y * wo + x];
                for (t, &g) in taps.iter().enumerate() {
                    let slot = &mut tmp[(y + t) * wo + x];
                    *slot = *slot + g * u;
                }
            }
        }
        let dst = &mut grad[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x in 0..wo {
                let u = tmp[y * wo + x];
                for (t, &g) in taps.iter().enumerate() {
                    let slot = &mut dst[y * w + x + t];
                    *slot = *slot + g * u;
                }
            }
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution used as the reference.
    fn naive_conv(input: &[f64], weight: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.cout * g.ho * g.wo];
        for b in 0..g.batch {
            for o in 0..g.cout {
                for y in 0..g.ho {
                    for x in 0..g.wo {
                        let mut acc = bias[o];
                        for c in 0..g.cin {
                            for i in 0..g.k {
                                for j in 0..g.k {
                                    let iy = y as isize + i as isize - g.pad;
                                    let ix = x as isize + j as isize - g.pad;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += input[((b * g.cin + c) * g.h + iy as usize) * g.w + ix as usize]
                                        * weight[((o * g.cin + c) * g.k + i) * g.k + j];
                                }
                            }
                        }
                        out[((b * g.cout + o) * g.ho + y) * g.wo + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_gemm_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, pad, h, w) in &[(1, 0, 5, 7), (3, 1, 9, 4), (5, 2, 6, 6), (3, 0, 7, 8), (5, 1, 40, 33)] {
            let dims = [2, 3, h, w];
            let g = ConvGeom::new(dims, [4, 3, k, k], pad).unwrap();
            let input: Vec<f64> = (0..2 * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
            let weight: Vec<f64> = (0..4 * 3 * k * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bias: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = conv2d(&input, &weight, Some(&bias), &g);
            let slow = naive_conv(&input, &weight, &bias, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "k={k} pad={pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn even_kernel_is_a_configuration_error() {
        let err = ConvGeom::new([1, 1, 4, 4], [1, 1, 2, 2], 0).unwrap_err();
        assert!(matches!(err, LaffError::Config(_)));
        let err = ConvGeom::new([1, 2, 4, 4], [1, 1, 3, 3], 1).unwrap_err();
        assert!(matches!(err, LaffError::Dimension(_)));
    }

    #[test]
    fn max_pool_first_index_on_ties() {
        let (v, i) = global_max_pool(&[1.0f64, 3.0, 3.0, -2.0], 1, 4);
        assert_eq!(v, vec![3.0]);
        assert_eq!(i, vec![1]);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let taps = [0.25f64, 0.5, 0.25];
        let out = blur_valid(&vec![2.0; 25], 1, 5, 5, &taps);
        assert_eq!(out.len(), 9);
        assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }
}
