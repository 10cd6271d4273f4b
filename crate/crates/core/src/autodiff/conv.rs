//! im2col helpers for 2-d convolution over `[N, C, H, W]` batches.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(mismatch());
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let (h, wd) = (x[2] + 2 * padding, x[3] + 2 * padding);
        if w[2] > h || w[3] > wd {
            return Err(mismatch());
        }
        Ok(ConvGeom {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            out_channels: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            padding,
            out_h: (h - w[2]) / stride + 1,
            out_w: (wd - w[3]) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_image(&self) -> usize {
        self.out_channels * self.out_plane()
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_h, self.out_w]
    }

    /// Output positions `[lo, hi)` along one axis whose tap `k` lands inside
    /// an input of length `extent`.
    fn valid_outputs(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        // o·stride + k - padding ∈ [0, extent)
        let lo = self.padding.saturating_sub(k).div_ceil(self.stride);
        let hi = if extent + self.padding > k {
            ((extent + self.padding - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one image `[C, H, W]` into `cols` `[C·kh·kw, out_h·out_w]`.
    pub fn im2col<T: Scalar>(&self, image: &[T], cols: &mut [T]) {
        let plane = self.out_plane();
        let (s, p) = (self.stride, self.padding);
        for c in 0..self.in_channels {
            let chan = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                let (ri_lo, ri_hi) = self.valid_outputs(ki, self.height, self.out_h);
                for kj in 0..self.kw {
                    let (cj_lo, cj_hi) = self.valid_outputs(kj, self.width, self.out_w);
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oi in 0..self.out_h {
                        let out_row = &mut dst[oi * self.out_w..(oi + 1) * self.out_w];
                        if oi < ri_lo || oi >= ri_hi {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &chan[(oi * s + ki - p) * self.width..][..self.width];
                        out_row[..cj_lo].fill(T::zero());
                        out_row[cj_hi..].fill(T::zero());
                        if s == 1 {
                            let j0 = cj_lo + kj - p;
                            out_row[cj_lo..cj_hi].copy_from_slice(&src[j0..j0 + cj_hi - cj_lo]);
                        } else {
                            for oj in cj_lo..cj_hi {
                                out_row[oj] = src[oj * s + kj - p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters `cols` back, accumulating into `image`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], image: &mut [T]) {
        let plane = self.out_plane();
        let (s, p) = (self.stride, self.padding);
        for c in 0..self.in_channels {
            let chan = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                let (ri_lo, ri_hi) = self.valid_outputs(ki, self.height, self.out_h);
                for kj in 0..self.kw {
                    let (cj_lo, cj_hi) = self.valid_outputs(kj, self.width, self.out_w);
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oi in ri_lo..ri_hi {
                        let in_row = &mut chan[(oi * s + ki - p) * self.width..][..self.width];
                        let col_row = &src[oi * self.out_w..(oi + 1) * self.out_w];
                        if s == 1 {
                            let j0 = cj_lo + kj - p;
                            let dst = &mut in_row[j0..j0 + cj_hi - cj_lo];
                            for (d, v) in dst.iter_mut().zip(&col_row[cj_lo..cj_hi]) {
                                *d = *d + *v;
                            }
                        } else {
                            for oj in cj_lo..cj_hi {
                                let j = oj * s + kj - p;
                                in_row[j] = in_row[j] + col_row[oj];
                            }
                        }
                    }
                }
            }
        }
    }
}
