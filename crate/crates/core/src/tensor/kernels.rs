//! Slice-level numeric kernels. All matrix kernels accumulate into `out`.

use super::Float;
use crate::parallel;

const K_BLOCK: usize = 128;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let rows = parallel::rows_per_task(m, k * n);
    parallel::for_each_chunk_mut(out, rows * n, m * k * n, |ci, chunk| {
        let r0 = ci * rows;
        let nrows = chunk.len() / n;
        for p0 in (0..k).step_by(K_BLOCK) {
            let p1 = (p0 + K_BLOCK).min(k);
            let mut r = 0;
            while r + 4 <= nrows {
                let (o0, rest) = chunk[r * n..(r + 4) * n].split_at_mut(n);
                let (o1, rest) = rest.split_at_mut(n);
                let (o2, o3) = rest.split_at_mut(n);
                let a0 = &a[(r0 + r) * k..(r0 + r + 1) * k];
                let a1 = &a[(r0 + r + 1) * k..(r0 + r + 2) * k];
                let a2 = &a[(r0 + r + 2) * k..(r0 + r + 3) * k];
                let a3 = &a[(r0 + r + 3) * k..(r0 + r + 4) * k];
                for p in p0..p1 {
                    let brow = &b[p * n..(p + 1) * n];
                    let (x0, x1, x2, x3) = (a0[p], a1[p], a2[p], a3[p]);
                    for j in 0..n {
                        let bv = brow[j];
                        o0[j] += x0 * bv;
                        o1[j] += x1 * bv;
                        o2[j] += x2 * bv;
                        o3[j] += x3 * bv;
                    }
                }
                r += 4;
            }
            for rr in r..nrows {
                let orow = &mut chunk[rr * n..(rr + 1) * n];
                let arow = &a[(r0 + rr) * k..(r0 + rr + 1) * k];
                for p in p0..p1 {
                    axpy(arow[p], &b[p * n..(p + 1) * n], orow);
                }
            }
        }
    });
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let rows = parallel::rows_per_task(m, k * n);
    parallel::for_each_chunk_mut(out, rows * n, m * k * n, |ci, chunk| {
        let r0 = ci * rows;
        for (rr, orow) in chunk.chunks_exact_mut(n).enumerate() {
            let arow = &a[(r0 + rr) * k..(r0 + rr + 1) * k];
            for (j, o) in orow.iter_mut().enumerate() {
                *o += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    });
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn<T: Float>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let rows = parallel::rows_per_task(m, k * n);
    parallel::for_each_chunk_mut(out, rows * n, m * k * n, |ci, chunk| {
        let r0 = ci * rows;
        let nrows = chunk.len() / n;
        for p0 in (0..k).step_by(K_BLOCK) {
            let p1 = (p0 + K_BLOCK).min(k);
            for rr in 0..nrows {
                let orow = &mut chunk[rr * n..(rr + 1) * n];
                for p in p0..p1 {
                    axpy(a[p * m + r0 + rr], &b[p * n..(p + 1) * n], orow);
                }
            }
        }
    });
}

#[inline]
pub fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<T: Float>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&a, &b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// Geometry of a 2-D convolution over one `[C, H, W]` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds receptive fields into `cols[(C·kh·kw) × (OH·OW)]`; padding reads as zero.
pub fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * ncols);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Float>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
