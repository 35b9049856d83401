//! Strided matrix products and the im2col/col2im lowering used by convolutions.

/// Strided view of a matrix stored in a slice: element `(i, j)` lives at
/// `i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatView {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows × cols` matrix, seen as `cols × rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, rs: 1, cs: cols }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c = alpha * a · b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: &[f64], av: MatView, b: &[f64], bv: MatView, beta: f64, c: &mut [f64], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dims");
    assert_eq!(av.rows, cv.rows, "gemm rows");
    assert_eq!(bv.cols, cv.cols, "gemm cols");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = i * cv.rs + j * cv.cs;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(av.max_index() < a.len(), "gemm: a out of bounds");
    assert!(bv.max_index() < b.len(), "gemm: b out of bounds");
    assert!(cv.max_index() < c.len(), "gemm: c out of bounds");
    // SAFETY: every index reachable through the three views was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Geometry of a 2-D convolution window over a `[C, H, W]` plane stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn conv(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { channels, h, w, k, stride, pad, ho, wo }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// True when im2col is the identity (1×1, stride 1, no padding).
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Lower `x` (`[C, H, W]`) into `cols` (`[C·k·k, Ho·Wo]`).
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let npos = g.ho * g.wo;
    for ci in 0..g.channels {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `x`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let npos = g.ho * g.wo;
    for ci in 0..g.channels {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ci * g.k + ki) * g.k + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn gemm_matches_naive_product_with_transposes() {
        // a: 2x3, b stored as 2x3 and used transposed (3x2)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, -1.0, 2.0, 1.0, 0.5];
        let mut c = [0.0; 4];
        gemm(1.0, &a, MatView::row_major(2, 3), &b, MatView::transposed(2, 3), 0.0, &mut c, MatView::row_major(2, 2));
        assert_eq!(c, [1.0 - 3.0, 2.0 + 2.0 + 1.5, 4.0 - 6.0, 8.0 + 5.0 + 3.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::conv(2, 5, 4, 3, 2, 1);
        let x: alloc::vec::Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: alloc::vec::Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
