//! Slice-level compute kernels shared by the tape's forward and backward rules.

use crate::scalar::Scalar;

/// `out (+)= a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n < 16 && k >= 32 {
        // narrow outputs: long dot products against bᵀ are faster than short axpys
        let mut bt = vec![T::zero(); k * n];
        transpose(b, k, n, &mut bt);
        matmul_a_bt(a, &bt, m, k, n, out, accumulate);
        return;
    }
    if !accumulate {
        out.fill(T::zero());
    }
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums, which lets the compiler
/// vectorize it.
#[inline]
pub fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (a, b) in (&mut xc).zip(&mut yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (&a, &b) in xc.remainder().iter().zip(yc.remainder()) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `out (+)= aᵀ · b` with `a[k×m]`, `b[k×n]`.
pub fn matmul_at_b<T: Scalar>(
    a: &[T],
    b: &[T],
    k: usize,
    m: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n < 16 && k >= 32 {
        let mut at = vec![T::zero(); m * k];
        let mut bt = vec![T::zero(); n * k];
        transpose(a, k, m, &mut at);
        transpose(b, k, n, &mut bt);
        matmul_a_bt(&at, &bt, m, k, n, out, accumulate);
        return;
    }
    if !accumulate {
        out.fill(T::zero());
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in a[p * m..(p + 1) * m].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out (+)= a · bᵀ` with `a[m×k]`, `b[n×k]`.
pub fn matmul_a_bt<T: Scalar>(
    a: &[T],
    b: &[T],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if k < 32 {
        let mut bt = vec![T::zero(); k * n];
        transpose(b, n, k, &mut bt);
        matmul(a, &bt, m, k, n, out, accumulate);
        return;
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot = dot(arow, brow);
            if accumulate {
                out[i * n + j] += dot;
            } else {
                out[i * n + j] = dot;
            }
        }
    }
}

pub fn transpose<T: Scalar>(x: &[T], m: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
}

/// Geometry of a 2D cross-correlation from `channels×h×w` to `?×out_h×out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            h,
            w,
            kernel,
            stride,
            pad,
            out_h: (h + 2 * pad - kernel) / stride + 1,
            out_w: (w + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfolds `x[channels×h×w]` into `[channels·k·k × out_h·out_w]`.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.col_cols();
    let mut col = vec![T::zero(); g.col_rows() * cols];
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut col[r * cols..(r + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            dst[oy * g.out_w + ox] = plane[iy * g.w + ix];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `out[channels×h×w]`.
pub fn col2im<T: Scalar>(col: &[T], g: &ConvGeometry, out: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let src = &col[r * cols..(r + 1) * cols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(ix) = g.source(ox, kx, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Source index pair and weight of the second sample for align-corners-false
/// resampling of one axis from `src` to `dst` cells.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Resamples every channel of `x[c×h×w]` to `out_h×out_w`.
pub fn bilinear_resize<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = vec![T::zero(); c * out_h * out_w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::cast(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::cast(lx);
                let top = plane[y0 * w + x0] * (T::one() - lx) + plane[y0 * w + x1] * lx;
                let bot = plane[y1 * w + x0] * (T::one() - lx) + plane[y1 * w + x1] * lx;
                out[(ch * out_h + oy) * out_w + ox] = top * (T::one() - ly) + bot * ly;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`], accumulating into `dx[c×h×w]`.
pub fn bilinear_resize_adjoint<T: Scalar>(
    dy: &[T],
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    dx: &mut [T],
) {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::cast(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::cast(lx);
                let g = dy[(ch * out_h + oy) * out_w + ox];
                plane[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                plane[y0 * w + x1] += g * (T::one() - ly) * lx;
                plane[y1 * w + x0] += g * ly * (T::one() - lx);
                plane[y1 * w + x1] += g * ly * lx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3×4
        let mut ab = vec![0.0; 8];
        matmul(&a, &b, 2, 3, 4, &mut ab, false);
        let mut at = vec![0.0; 6];
        transpose(&a, 2, 3, &mut at);
        let mut ab2 = vec![0.0; 8];
        matmul_at_b(&at, &b, 3, 2, 4, &mut ab2, false);
        let mut bt = vec![0.0; 12];
        transpose(&b, 3, 4, &mut bt);
        let mut ab3 = vec![0.0; 8];
        matmul_a_bt(&a, &bt, 2, 3, 4, &mut ab3, false);
        assert_eq!(ab, ab2);
        assert_eq!(ab, ab3);
    }

    #[test]
    fn conv_geometry_output_extent() {
        let g = ConvGeometry::new(3, 64, 48, 3, 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (32, 24));
        let g = ConvGeometry::new(3, 256, 192, 7, 2, 3).unwrap();
        assert_eq!((g.out_h, g.out_w), (128, 96));
        assert!(ConvGeometry::new(1, 2, 2, 7, 1, 0).is_none());
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|v| ((v * 5) % 13) as f64)
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
