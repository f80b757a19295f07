//! Raw compute kernels shared by forward and backward passes.
//!
//! Every kernel writes each output element from exactly one call site, so
//! rayon parallelism over disjoint output chunks cannot change results.

use super::Scalar;
use rayon::prelude::*;

/// Flop threshold below which parallel dispatch is not worth the overhead.
const PAR_THRESHOLD: usize = 1 << 16;

/// C\[m,n\] += A\[m,k\] @ B\[k,n\]
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [S], i: usize| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * *bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C\[m,n\] += A\[m,k\] @ B\[n,k\]^T
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |c_row: &mut [S], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = S::zero();
            for (av, bv) in a_row.iter().zip(b_row) {
                s = s + *av * *bv;
            }
            *cv = *cv + s;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_nt_acc(a, b, &mut c, m, k, n);
    c
}

/// C\[m,n\] += A\[k,m\]^T @ B\[k,n\]
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Serial over k keeps the accumulation order fixed per output row.
    let row = |c_row: &mut [S], i: usize| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * *bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(c_row, i));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(c_row, i);
        }
    }
}

/// Geometry of one 2-D convolution (square kernel, symmetric padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Option<ConvGeom> {
        if x_shape.len() != 4 || w_shape.len() != 4 || x_shape[1] != w_shape[1] {
            return None;
        }
        if w_shape[2] != w_shape[3] || stride == 0 {
            return None;
        }
        let (n, c_in, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (c_out, ksize) = (w_shape[0], w_shape[2]);
        if h + 2 * pad < ksize || w + 2 * pad < ksize {
            return None;
        }
        let h_out = (h + 2 * pad - ksize) / stride + 1;
        let w_out = (w + 2 * pad - ksize) / stride + 1;
        Some(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            ksize,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn cols_rows(&self) -> usize {
        self.c_in * self.ksize * self.ksize
    }

    pub fn out_spatial(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold one sample `x[c_in, h, w]` into `[c_in*k*k, h_out*w_out]`.
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [S]) {
    debug_assert_eq!(cols.len(), g.cols_rows() * g.out_spatial());
    let sp = g.out_spatial();
    let mut r = 0usize;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let dst = &mut cols[r * sp..(r + 1) * sp];
                let mut o = 0usize;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[o] = if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            S::zero()
                        };
                        o += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Fold `[c_in*k*k, h_out*w_out]` column gradients back into `dx[c_in, h, w]`.
pub fn col2im_acc<S: Scalar>(cols: &[S], g: &ConvGeom, dx: &mut [S]) {
    let sp = g.out_spatial();
    let mut r = 0usize;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.ksize {
            for kx in 0..g.ksize {
                let src = &cols[r * sp..(r + 1) * sp];
                let mut o = 0usize;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                            let idx = iy as usize * g.w + ix as usize;
                            plane[idx] = plane[idx] + src[o];
                        }
                        o += 1;
                    }
                }
                r += 1;
            }
        }
    }
}

/// Forward convolution; returns `[n, c_out, h_out, w_out]`.
pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, g: &ConvGeom) -> Vec<S> {
    let sp = g.out_spatial();
    let sample_in = g.c_in * g.h * g.w;
    let sample_out = g.c_out * sp;
    let mut out = vec![S::zero(); g.n * sample_out];
    let run = |(xs, os): (&[S], &mut [S])| {
        let mut cols = vec![S::zero(); g.cols_rows() * sp];
        im2col(xs, g, &mut cols);
        matmul_acc(w, &cols, os, g.c_out, g.cols_rows(), sp);
        if let Some(b) = bias {
            for c in 0..g.c_out {
                let bv = b[c];
                for v in &mut os[c * sp..(c + 1) * sp] {
                    *v = *v + bv;
                }
            }
        }
    };
    if g.n > 1 {
        x.par_chunks(sample_in)
            .zip(out.par_chunks_mut(sample_out))
            .for_each(run);
    } else {
        x.chunks(sample_in).zip(out.chunks_mut(sample_out)).for_each(run);
    }
    out
}

/// Backward convolution: fills `dx` (same shape as x) and accumulates into
/// `dw`/`db`. The weight-gradient loop is parallel over output channels so
/// summation over samples stays in a fixed order.
pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    g: &ConvGeom,
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
    db: Option<&mut [S]>,
) {
    let sp = g.out_spatial();
    let kk = g.cols_rows();
    let sample_in = g.c_in * g.h * g.w;
    let sample_out = g.c_out * sp;

    if let Some(dx) = dx {
        let run = |(dys, dxs): (&[S], &mut [S])| {
            // dcols = W^T [kk, c_out] @ dy [c_out, sp]
            let mut dcols = vec![S::zero(); kk * sp];
            matmul_tn_acc(w, dys, &mut dcols, kk, g.c_out, sp);
            col2im_acc(&dcols, g, dxs);
        };
        if g.n > 1 {
            dy.par_chunks(sample_out)
                .zip(dx.par_chunks_mut(sample_in))
                .for_each(run);
        } else {
            dy.chunks(sample_out).zip(dx.chunks_mut(sample_in)).for_each(run);
        }
    }

    if let Some(dw) = dw {
        // Serial over samples, parallel over c_out rows: each dw row is owned
        // by one closure invocation.
        let cols_all: Vec<Vec<S>> = if g.n > 1 {
            x.par_chunks(sample_in)
                .map(|xs| {
                    let mut cols = vec![S::zero(); kk * sp];
                    im2col(xs, g, &mut cols);
                    cols
                })
                .collect()
        } else {
            x.chunks(sample_in)
                .map(|xs| {
                    let mut cols = vec![S::zero(); kk * sp];
                    im2col(xs, g, &mut cols);
                    cols
                })
                .collect()
        };
        let row = |dw_row: &mut [S], c: usize| {
            for (s, cols) in cols_all.iter().enumerate() {
                let dy_row = &dy[s * sample_out + c * sp..s * sample_out + (c + 1) * sp];
                // dw[c, r] += dy[c, :] . cols[r, :]
                for (r, dwv) in dw_row.iter_mut().enumerate() {
                    let col_row = &cols[r * sp..(r + 1) * sp];
                    let mut acc = S::zero();
                    for (a, b) in dy_row.iter().zip(col_row) {
                        acc = acc + *a * *b;
                    }
                    *dwv = *dwv + acc;
                }
            }
        };
        if g.c_out > 1 && g.n * kk * sp >= PAR_THRESHOLD {
            dw.par_chunks_mut(kk).enumerate().for_each(|(c, r)| row(r, c));
        } else {
            for (c, r) in dw.chunks_mut(kk).enumerate() {
                row(r, c);
            }
        }
    }

    if let Some(db) = db {
        for s in 0..g.n {
            for c in 0..g.c_out {
                let dy_row = &dy[s * sample_out + c * sp..s * sample_out + (c + 1) * sp];
                let mut acc = S::zero();
                for v in dy_row {
                    acc = acc + *v;
                }
                db[c] = db[c] + acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        // 2x3 times 3x2: hand-checked product.
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = vec![1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);
    }

    #[test]
    fn matmul_nt_matches_manual_transpose() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0]; // 2x2
        let b = vec![5.0f64, 6.0, 7.0, 8.0]; // 2x2, used as B^T
        let c = matmul_nt(&a, &b, 2, 2, 2);
        // A @ B^T where B rows are [5,6],[7,8]
        assert_eq!(c, vec![17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn conv_geom_stride2_pad1() {
        let g = ConvGeom::new(&[1, 3, 32, 32], &[8, 3, 3, 3], 2, 1).unwrap();
        assert_eq!((g.h_out, g.w_out), (16, 16));
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish integer fills.
        let g = ConvGeom::new(&[1, 2, 5, 5], &[1, 2, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 25).map(|i| (i % 7) as f64 - 3.0).collect();
        let mut cols = vec![0.0; g.cols_rows() * g.out_spatial()];
        im2col(&x, &g, &mut cols);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 13) % 5) as f64 - 2.0).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im_acc(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
