//! Raw loops behind the convolution and pooling graph nodes.
//!
//! All buffers are row-major `[N, C, H, W]`. Convolution is cross-correlation,
//! evaluated per image as a matrix product over unfolded patches (1×1
//! kernels skip the unfolding).

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output column range `[lo, hi)` whose input column `ox*s + kx - pad` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kx {
            ((self.w + self.pad - kx - 1) / self.stride + 1).min(self.w_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn in_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Row-major `m×k` (or `k×m` with `transpose`) operand view.
#[derive(Clone, Copy)]
struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    transpose: bool,
}

impl<'a, T> Mat<'a, T> {
    fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            transpose: false,
        }
    }

    fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            transpose: !self.transpose,
            ..self
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transpose {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c ← a·b + beta·c` for a row-major `c`.
fn matmul<T: Scalar>(a: Mat<T>, b: Mat<T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above keep every strided index inside the
    // buffers, and `c` is a unique borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Unfolds one `[c_in, h, w]` image into `[c_in·kh·kw, h_out·w_out]`.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.h_out {
                    let row = &mut dst[oy * g.w_out..][..g.w_out];
                    let Some(iy) = g.in_row(oy, ky) else {
                        row.fill(T::zero());
                        continue;
                    };
                    row[..lo].fill(T::zero());
                    row[hi..].fill(T::zero());
                    let src = &plane[iy * g.w..][..g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        row[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, v) in row[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto `[c_in, h, w]`, accumulating.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], gx: &mut [T]) {
    let p = g.h_out * g.w_out;
    for ci in 0..g.c_in {
        let plane = &mut gx[ci * g.h * g.w..][..g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.h_out {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    let row = &src[oy * g.w_out..][lo..hi];
                    let dst = &mut plane[iy * g.w..][..g.w];
                    let ix0 = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        for (d, &v) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    } else {
                        for (j, &v) in row.iter().enumerate() {
                            let d = &mut dst[ix0 + j * g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let in_image = g.c_in * g.h * g.w;
    let p = g.h_out * g.w_out;
    let kmat = Mat::new(kernel, g.c_out, g.patch());
    let mut out = vec![T::zero(); g.n * g.c_out * p];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    for n in 0..g.n {
        let x = &input[n * in_image..][..in_image];
        let o = &mut out[n * g.c_out * p..][..g.c_out * p];
        let cols = if g.pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        matmul(kmat, Mat::new(cols, g.patch(), p), T::zero(), o);
        if let Some(b) = bias {
            for (plane, &bv) in o.chunks_exact_mut(p).zip(b) {
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input<T: Scalar>(g: &ConvGeom, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let in_image = g.c_in * g.h * g.w;
    let p = g.h_out * g.w_out;
    let kt = Mat::new(kernel, g.c_out, g.patch()).t();
    let mut gin = vec![T::zero(); g.n * in_image];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    for n in 0..g.n {
        let go = Mat::new(&grad_out[n * g.c_out * p..][..g.c_out * p], g.c_out, p);
        let gx = &mut gin[n * in_image..][..in_image];
        if g.pointwise() {
            matmul(kt, go, T::zero(), gx);
        } else {
            matmul(kt, go, T::zero(), &mut col);
            col2im(g, &col, gx);
        }
    }
    gin
}

pub(crate) fn conv2d_backward_kernel<T: Scalar>(g: &ConvGeom, grad_out: &[T], input: &[T]) -> Vec<T> {
    let in_image = g.c_in * g.h * g.w;
    let p = g.h_out * g.w_out;
    let mut gk = vec![T::zero(); g.c_out * g.patch()];
    let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); g.patch() * p] };
    for n in 0..g.n {
        let x = &input[n * in_image..][..in_image];
        let go = Mat::new(&grad_out[n * g.c_out * p..][..g.c_out * p], g.c_out, p);
        let cols = if g.pointwise() {
            x
        } else {
            im2col(g, x, &mut col);
            &col
        };
        matmul(go, Mat::new(cols, g.patch(), p).t(), T::one(), &mut gk);
    }
    gk
}

/// Non-overlapping `size`×`size` average pooling; `h` and `w` must be multiples of `size`.
pub(crate) fn avg_pool_forward<T: Scalar>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<T> {
    let (ho, wo) = (h / size, w / size);
    let scale = T::one() / T::of((size * size) as f64);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let x = &input[p * h * w..][..h * w];
        let o = &mut out[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = T::zero();
                for dy in 0..size {
                    for dx in 0..size {
                        acc = acc + x[(oy * size + dy) * w + ox * size + dx];
                    }
                }
                o[oy * wo + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Scalar>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    size: usize,
) -> Vec<T> {
    let (ho, wo) = (h / size, w / size);
    let scale = T::one() / T::of((size * size) as f64);
    let mut gin = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let go = &grad_out[p * ho * wo..][..ho * wo];
        let gx = &mut gin[p * h * w..][..h * w];
        for y in 0..h {
            for x in 0..w {
                gx[y * w + x] = go[(y / size) * wo + x / size] * scale;
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> ConvGeom {
        ConvGeom {
            n: 1,
            c_in: 1,
            h,
            w,
            c_out: 1,
            kh: k,
            kw: k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        }
    }

    /// Straightforward padded cross-correlation, used as the reference.
    fn naive(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.h_out * g.w_out];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = 0.0;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            acc += k[ky * g.kw + kx] * x[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                out[oy * g.w_out + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_naive_for_strides_and_padding() {
        for &(h, w, k, s, p) in &[
            (5, 7, 3, 1, 1),
            (6, 6, 3, 2, 1),
            (7, 5, 2, 3, 0),
            (4, 4, 3, 1, 2),
            (3, 3, 1, 2, 0),
        ] {
            let g = geom(h, w, k, s, p);
            let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.37).sin()).collect();
            let kern: Vec<f64> = (0..k * k).map(|i| (i as f64 * 1.3).cos()).collect();
            let fast = conv2d_forward(&g, &x, &kern, None);
            let slow = naive(&g, &x, &kern);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12, "{h}x{w} k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn backward_passes_are_adjoint_to_forward() {
        // <conv(x, k), go> = <x, dX(go)> = <k, dK(go, x)>
        for &(s, p, kk) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let (n, c_in, h, w, c_out) = (2, 3, 6, 5, 4);
            let g = ConvGeom {
                n,
                c_in,
                h,
                w,
                c_out,
                kh: kk,
                kw: kk,
                stride: s,
                pad: p,
                h_out: (h + 2 * p - kk) / s + 1,
                w_out: (w + 2 * p - kk) / s + 1,
            };
            let x: Vec<f64> = (0..n * c_in * h * w).map(|i| (i as f64 * 0.71).sin()).collect();
            let k: Vec<f64> = (0..c_out * c_in * kk * kk).map(|i| (i as f64 * 0.29).cos()).collect();
            let y = conv2d_forward(&g, &x, &k, None);
            let go: Vec<f64> = (0..y.len()).map(|i| (i as f64 * 1.7).sin()).collect();
            let lhs: f64 = y.iter().zip(&go).map(|(a, b)| a * b).sum();
            let gx = conv2d_backward_input(&g, &go, &k);
            let gk = conv2d_backward_kernel(&g, &go, &x);
            let via_x: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
            let via_k: f64 = k.iter().zip(&gk).map(|(a, b)| a * b).sum();
            assert!((lhs - via_x).abs() < 1e-9 * lhs.abs().max(1.0), "s{s} p{p} k{kk}");
            assert!((lhs - via_k).abs() < 1e-9 * lhs.abs().max(1.0), "s{s} p{p} k{kk}");
        }
    }

    #[test]
    fn pooling_round_trip_shapes() {
        let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let y = avg_pool_forward(&x, 1, 4, 4, 2);
        assert_eq!(y, vec![2.5, 4.5, 10.5, 12.5]);
        let g = avg_pool_backward(&[1.0, 1.0, 1.0, 1.0], 1, 4, 4, 2);
        assert!(g.iter().all(|&v| v == 0.25));
    }
}
