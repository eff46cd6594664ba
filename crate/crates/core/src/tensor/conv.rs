use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (k, kh, kw) = (kernels[0], kernels[2], kernels[3]);
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "kernel {kh}×{kw} larger than padded input {}×{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for output position `o` and kernel tap `t`, if it
    /// falls inside the unpadded image.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        (o * self.stride + t).checked_sub(self.pad).filter(|&v| v < extent)
    }
}

/// Unfolds `x: [N, C, H, W]` into `[C·kh·kw, N·Ho·Wo]`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let spatial = g.n * g.out_hw();
    let mut cols = vec![T::zero(); g.patch() * spatial];
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * spatial..][..spatial];
                for ni in 0..g.n {
                    let plane = &x[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ky, g.h) else {
                            continue;
                        };
                        let out_row = &mut dst[ni * g.out_hw() + oy * g.out_w..][..g.out_w];
                        for (ox, d) in out_row.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                *d = plane[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds `[C·kh·kw, N·Ho·Wo]` back onto `[N, C, H, W]`, accumulating.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let spatial = g.n * g.out_hw();
    for ci in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * spatial..][..spatial];
                for ni in 0..g.n {
                    let plane = &mut dx[(ni * g.c + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.out_h {
                        let Some(iy) = g.source(oy, ky, g.h) else {
                            continue;
                        };
                        let in_row = &src[ni * g.out_hw() + oy * g.out_w..][..g.out_w];
                        for (ox, &v) in in_row.iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                plane[iy * g.w + ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
