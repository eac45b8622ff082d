//! Raw slice kernels shared by forward and backward passes.

/// Matrix operand: row-major storage, optionally read transposed.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a · b` for logical shapes `a: m×k`, `b: k×n`.
pub fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above pin every buffer length to the logical
    // shape the strides describe, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the column matrix: `channels * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Columns of the column matrix: `batch * out_h * out_w`.
    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfold `[B, C, H, W]` into `[C*kh*kw, B*Ho*Wo]`; out-of-image taps read zero.
pub fn im2col(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let ncols = g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * ncols];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[oy * wo + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[B, C, H, W]`.
pub fn col2im(cols: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let ncols = g.col_cols();
    let mut x = vec![0.0; g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst =
                        &mut x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[iy as usize * g.width + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Window bounds used by adaptive pooling: `[floor(i*n/out), ceil((i+1)*n/out))`.
pub fn adaptive_window(i: usize, input: usize, output: usize) -> (usize, usize) {
    let start = i * input / output;
    let end = ((i + 1) * input).div_ceil(output);
    (start, end)
}

/// Max pooling over `[planes, H, W]` with a square window. Returns values and
/// the flat input index of each winner; ties go to the lowest index.
pub fn max_pool(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_i = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i);
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Conv2dGeom {
            batch: 2,
            channels: 3,
            height: 5,
            width: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..2 * 3 * 5 * 4)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposed_operands() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let mut out = vec![0.0; 4];
        gemm(
            MatRef::new(&a, 2, 3),
            MatRef::new(&a, 2, 3).t(),
            &mut out,
            0.0,
        );
        assert_eq!(out, vec![14.0, 32.0, 32.0, 77.0]);
        let mut out = vec![1.0; 9];
        gemm(
            MatRef::new(&a, 2, 3).t(),
            MatRef::new(&a, 2, 3),
            &mut out,
            1.0,
        );
        assert_eq!(out[0], 1.0 + 17.0);
    }

    #[test]
    fn adaptive_windows_cover_input() {
        assert_eq!(adaptive_window(0, 7, 3), (0, 3));
        assert_eq!(adaptive_window(1, 7, 3), (2, 5));
        assert_eq!(adaptive_window(2, 7, 3), (4, 7));
    }
}
