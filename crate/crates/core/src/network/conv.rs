//! Convolution lowered to a single matrix product through im2col.
//!
//! The column matrix has `C * kh * kw` rows and `B * Ho * Wo` columns, so
//! the forward pass is one `kernel (O x C*kh*kw) * cols` product and the
//! backward pass reuses the same two matrices.

use super::Conv2d;
use crate::tensor::{gemm, Strided};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(conv: &Conv2d, batch: usize, h: usize, w: usize) -> Self {
        let ks = conv.kernel.shape();
        let (ho, wo) = conv.output_hw(h, w).expect("validated at construction");
        ConvGeometry {
            batch,
            in_c: ks[1],
            h,
            w,
            out_c: ks[0],
            kh: ks[2],
            kw: ks[3],
            ho,
            wo,
            stride: conv.stride,
            pad: conv.padding,
        }
    }

    pub fn patch(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    pub fn columns(&self) -> usize {
        self.batch * self.ho * self.wo
    }

    /// Input coordinate for output position `(oy, ox)` and kernel tap
    /// `(ky, kx)`, or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ncols = g.columns();
    let mut cols = vec![0.0; g.patch() * ncols];
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &input[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                dst[(b * g.ho + oy) * g.wo + ox] = plane[y * g.w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ncols = g.columns();
    let mut out = vec![0.0; g.batch * g.in_c * g.h * g.w];
    for c in 0..g.in_c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let plane = &mut out[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        for ox in 0..g.wo {
                            if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                                plane[y * g.w + x] += src[(b * g.ho + oy) * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the `[B, O, Ho, Wo]` output buffer and the column matrix.
pub(crate) fn forward(conv: &Conv2d, input: &[f64], g: &ConvGeometry) -> (Vec<f64>, Vec<f64>) {
    let cols = im2col(input, g);
    let ncols = g.columns();
    let prod = gemm(
        g.out_c,
        g.patch(),
        ncols,
        Strided::row_major(conv.kernel.data(), g.patch()),
        Strided::row_major(&cols, ncols),
    );
    let spatial = g.ho * g.wo;
    let mut out = vec![0.0; g.batch * g.out_c * spatial];
    for o in 0..g.out_c {
        let bias = conv.bias.as_ref().map_or(0.0, |b| b[o]);
        for b in 0..g.batch {
            let src = &prod[o * ncols + b * spatial..][..spatial];
            let dst = &mut out[(b * g.out_c + o) * spatial..][..spatial];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
    pub input: Vec<f64>,
}

pub(crate) fn backward(conv: &Conv2d, cols: &[f64], d_out: &[f64], g: &ConvGeometry) -> ConvGrads {
    let ncols = g.columns();
    let spatial = g.ho * g.wo;
    // Rearrange [B, O, Ho, Wo] into the O x (B*Ho*Wo) layout of the product.
    let mut d_mat = vec![0.0; g.out_c * ncols];
    let mut d_bias = vec![0.0; g.out_c];
    for b in 0..g.batch {
        for o in 0..g.out_c {
            let src = &d_out[(b * g.out_c + o) * spatial..][..spatial];
            d_mat[o * ncols + b * spatial..][..spatial].copy_from_slice(src);
            d_bias[o] += src.iter().sum::<f64>();
        }
    }
    let d_kernel = gemm(
        g.out_c,
        ncols,
        g.patch(),
        Strided::row_major(&d_mat, ncols),
        Strided::transposed(cols, ncols),
    );
    let d_cols = gemm(
        g.patch(),
        g.out_c,
        ncols,
        Strided::transposed(conv.kernel.data(), g.patch()),
        Strided::row_major(&d_mat, ncols),
    );
    ConvGrads {
        kernel: d_kernel,
        bias: d_bias,
        input: col2im(&d_cols, g),
    }
}
