//! Convolution kernels shared by the graph ops.
//!
//! Every reduction accumulates in `f64`. The whole batch is unfolded into
//! one column matrix (im2col) and multiplied with a single-threaded blocked
//! GEMM, whose summation order depends only on the matrix sizes.

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Output extent of a strided, zero-padded cross-correlation, if positive.
pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, if positive.
pub(crate) fn conv_t_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let full = (len - 1) * stride + kernel;
    if full <= 2 * pad || stride == 0 {
        return None;
    }
    Some(full - 2 * pad)
}

/// Indices `j` in `[0, count)` with `j * s + k - p` inside `[0, limit)`.
#[inline]
fn span(count: usize, k: usize, p: usize, s: usize, limit: usize) -> (usize, usize) {
    let (k, p, s, limit) = (k as i64, p as i64, s as i64, limit as i64);
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let top = limit - 1 + p - k;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / s + 1).min(count as i64);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

/// Gathers the receptive fields of a `c`×`h`×`w` image for an `oh`×`ow`
/// output grid: row `(ci, ky, kx)`, column `oy·ow + ox`. Padding reads as 0.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(img: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, k: (usize, usize), s: usize, p: usize, col: &mut [f64]) {
    let plane = oh * ow;
    col.fill(0.0);
    for ci in 0..c {
        let src = &img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k.0 {
            let (oy0, oy1) = span(oh, ky, p, s, h);
            for kx in 0..k.1 {
                let (ox0, ox1) = span(ow, kx, p, s, w);
                let row = &mut col[((ci * k.0 + ky) * k.1 + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let srow = &src[iy * w..(iy + 1) * w];
                    let drow = &mut row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        drow[ox] = srow[ox * s + kx - p].as_f64();
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image accumulator.
#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, k: (usize, usize), s: usize, p: usize, img: &mut [f64]) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut img[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k.0 {
            let (oy0, oy1) = span(oh, ky, p, s, h);
            for kx in 0..k.1 {
                let (ox0, ox1) = span(ow, kx, p, s, w);
                let row = &col[((ci * k.0 + ky) * k.1 + kx) * plane..][..plane];
                for oy in oy0..oy1 {
                    let iy = oy * s + ky - p;
                    let drow = &mut dst[iy * w..(iy + 1) * w];
                    let srow = &row[oy * ow..(oy + 1) * ow];
                    for ox in ox0..ox1 {
                        drow[ox * s + kx - p] += srow[ox];
                    }
                }
            }
        }
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

/// N×C×P item-major values to a C×(N·P) channel-major `f64` matrix.
fn channel_major<T: Real>(v: &[T], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0f64; n * c * p];
    for i in 0..n {
        for ch in 0..c {
            let src = &v[(i * c + ch) * p..][..p];
            let dst = &mut out[(ch * n + i) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s.as_f64();
            }
        }
    }
    out
}

/// Inverse of [`channel_major`], adding `bias[ch]` when given.
fn item_major<T: Real>(m: &[f64], n: usize, c: usize, p: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for ch in 0..c {
        let b = bias.map_or(0.0, |b| b[ch].as_f64());
        for i in 0..n {
            let src = &m[(ch * n + i) * p..][..p];
            let dst = &mut out[(i * c + ch) * p..][..p];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(s + b);
            }
        }
    }
    out
}

/// C = A·B for row-major A (m×k) and B (k×n) given by element strides.
#[allow(clippy::too_many_arguments)]
fn dgemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize)) -> Vec<f64> {
    let mut c = vec![0f64; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    debug_assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserted extents keep every strided read inside `a` and
    // `b`, and `c` is a fresh m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// (rows×ka) · (ka×len), both row-major.
fn gemm_rows(a: &[f64], rows: usize, ka: usize, b: &[f64], len: usize) -> Vec<f64> {
    dgemm(rows, ka, len, a, (ka, 1), b, (len, 1))
}

/// Same as [`gemm_rows`] with `a` stored transposed (ka×rows).
fn gemm_rows_t(a: &[f64], rows: usize, ka: usize, b: &[f64], len: usize) -> Vec<f64> {
    dgemm(rows, ka, len, a, (1, rows), b, (len, 1))
}

/// out[r·kb + k] = dot(a_r, b_k) over rows of length `len`.
fn gram(a: &[f64], rows: usize, b: &[f64], kb: usize, len: usize) -> Vec<f64> {
    dgemm(rows, len, kb, a, (len, 1), b, (1, len))
}

/// im2col of every item into one K×(N·P) matrix.
#[allow(clippy::too_many_arguments)]
fn batch_im2col<T: Real>(img: &[T], n: usize, c: usize, hw: (usize, usize), ohw: (usize, usize), k: (usize, usize), s: usize, p: usize) -> Vec<f64> {
    let plane = ohw.0 * ohw.1;
    let kk = c * k.0 * k.1;
    let item = c * hw.0 * hw.1;
    let mut out = vec![0f64; kk * n * plane];
    let mut col = vec![0f64; kk * plane];
    for i in 0..n {
        im2col(&img[i * item..(i + 1) * item], c, hw.0, hw.1, ohw.0, ohw.1, k, s, p, &mut col);
        for r in 0..kk {
            out[(r * n + i) * plane..][..plane].copy_from_slice(&col[r * plane..(r + 1) * plane]);
        }
    }
    out
}

/// Adjoint of [`batch_im2col`], producing item-major values.
#[allow(clippy::too_many_arguments)]
fn batch_col2im<T: Real>(m: &[f64], n: usize, c: usize, hw: (usize, usize), ohw: (usize, usize), k: (usize, usize), s: usize, p: usize, bias: Option<&[T]>) -> Vec<T> {
    let plane = ohw.0 * ohw.1;
    let kk = c * k.0 * k.1;
    let item = c * hw.0 * hw.1;
    let mut out = vec![T::zero(); n * item];
    let mut col = vec![0f64; kk * plane];
    let mut acc = vec![0f64; item];
    for i in 0..n {
        for r in 0..kk {
            col[r * plane..(r + 1) * plane].copy_from_slice(&m[(r * n + i) * plane..][..plane]);
        }
        acc.fill(0.0);
        col2im(&col, c, hw.0, hw.1, ohw.0, ohw.1, k, s, p, &mut acc);
        let pix = hw.0 * hw.1;
        for (j, (o, a)) in out[i * item..(i + 1) * item].iter_mut().zip(&acc).enumerate() {
            let b = bias.map_or(0.0, |b| b[j / pix].as_f64());
            *o = T::from_f64(a + b);
        }
    }
    out
}

fn row_sums<T: Real>(m: &[f64], rows: usize) -> Vec<T> {
    let len = m.len() / rows.max(1);
    (0..rows).map(|r| T::from_f64(m[r * len..(r + 1) * len].iter().sum())).collect()
}

/// Cross-correlation. `x`: N×Cin×H×W, `w`: Cout×Cin×kh×kw, `b`: Cout.
///
/// For each output pixel the sum runs over (ci, ky, kx) in lexicographic
/// order and the bias is added last.
pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane = g.ho * g.wo;
    let kk = g.cin * g.kh * g.kw;
    let col = batch_im2col(x, g.n, g.cin, (g.h, g.w), (g.ho, g.wo), (g.kh, g.kw), g.stride, g.pad);
    let out = gemm_rows(&to_f64(w), g.cout, kk, &col, g.n * plane);
    item_major(&out, g.n, g.cout, plane, Some(b))
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let plane = g.ho * g.wo;
    let len = g.n * plane;
    let kk = g.cin * g.kh * g.kw;
    let dyt = channel_major(dy, g.n, g.cout, plane);
    let (dw, db) = if need_dw {
        let col = batch_im2col(x, g.n, g.cin, (g.h, g.w), (g.ho, g.wo), (g.kh, g.kw), g.stride, g.pad);
        (Some(cast(&gram(&dyt, g.cout, &col, kk, len))), Some(row_sums(&dyt, g.cout)))
    } else {
        (None, None)
    };
    let dx = need_dx.then(|| {
        let dcol = gemm_rows_t(&to_f64(w), kk, g.cout, &dyt, len);
        batch_col2im::<T>(&dcol, g.n, g.cin, (g.h, g.w), (g.ho, g.wo), (g.kh, g.kw), g.stride, g.pad, None)
    });
    ConvGrads { dx, dw, db }
}

/// Transposed convolution (the adjoint of [`conv2d_forward`] in `x`).
/// `x`: N×Cin×H×W, `w`: Cin×Cout×kh×kw, `b`: Cout; output N×Cout×Ho×Wo.
pub(crate) fn conv_t_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let pin = g.h * g.w;
    let kk = g.cout * g.kh * g.kw;
    let xt = channel_major(x, g.n, g.cin, pin);
    let col = gemm_rows_t(&to_f64(w), kk, g.cin, &xt, g.n * pin);
    batch_col2im(&col, g.n, g.cout, (g.ho, g.wo), (g.h, g.w), (g.kh, g.kw), g.stride, g.pad, Some(b))
}

pub(crate) fn conv_t_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let pin = g.h * g.w;
    let len = g.n * pin;
    let kk = g.cout * g.kh * g.kw;
    let col = batch_im2col(dy, g.n, g.cout, (g.ho, g.wo), (g.h, g.w), (g.kh, g.kw), g.stride, g.pad);
    let (dw, db) = if need_dw {
        let xt = channel_major(x, g.n, g.cin, pin);
        let dyt = channel_major(dy, g.n, g.cout, g.ho * g.wo);
        (Some(cast(&gram(&xt, g.cin, &col, kk, len))), Some(row_sums(&dyt, g.cout)))
    } else {
        (None, None)
    };
    let dx = need_dx.then(|| {
        let dxt = gemm_rows(&to_f64(w), g.cin, kk, &col, len);
        item_major::<T>(&dxt, g.n, g.cin, pin, None)
    });
    ConvGrads { dx, dw, db }
}

fn cast<T: Real>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&a| T::from_f64(a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_matches_brute_force() {
        for count in 1..7 {
            for k in 0..4 {
                for p in 0..3 {
                    for s in 1..4 {
                        for limit in 1..9 {
                            let (lo, hi) = span(count, k, p, s, limit);
                            let want: Vec<usize> = (0..count)
                                .filter(|&j| {
                                    let i = (j * s + k) as i64 - p as i64;
                                    i >= 0 && i < limit as i64
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, want, "count={count} k={k} p={p} s={s} limit={limit}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_extents() {
        assert_eq!(conv_out_len(128, 3, 2, 1), Some(64));
        assert_eq!(conv_out_len(196, 3, 2, 1), Some(98));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
        assert_eq!(conv_t_out_len(4, 4, 2, 1), Some(8));
    }
}
