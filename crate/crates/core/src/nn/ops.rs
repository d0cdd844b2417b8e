//! Hand-written CPU kernels for the hot spots of convolution and resampling.
//!
//! candle's strided copies dominate a shift-and-stack convolution at these
//! sizes, so patch extraction (`im2col`) and its adjoint (`col2im`) are
//! implemented directly, each one serving as the other's backward pass.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Patches {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl Patches {
    fn pad(&self) -> isize {
        (self.dilation * (self.kernel / 2)) as isize
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.height.div_ceil(self.stride), self.width.div_ceil(self.stride))
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(src_index, col_index)` for every in-bounds tap of one image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_dims();
        let (k, d, s, pad) = (self.kernel, self.dilation as isize, self.stride as isize, self.pad());
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for r in 0..oh {
                        let ir = r as isize * s + ki as isize * d - pad;
                        if ir < 0 || ir >= h {
                            continue;
                        }
                        let src_row = (c * self.height + ir as usize) * self.width;
                        let col_row = (row * oh + r) * ow;
                        // columns with 0 <= oc*s + off < w
                        let off = kj as isize * d - pad;
                        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
                        let hi = ((w - off) + s - 1).div_euclid(s).min(ow as isize);
                        for oc in lo.max(0)..hi.max(0) {
                            let ic = (oc * s + off) as usize;
                            f(src_row + ic, col_row + oc as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (oh, ow) = self.out_dims();
        let img = self.channels * self.height * self.width;
        let cols = self.rows() * oh * ow;
        let mut out = vec![T::zero(); batch * cols];
        for b in 0..batch {
            let s = &src[b * img..(b + 1) * img];
            let o = &mut out[b * cols..(b + 1) * cols];
            self.for_each_tap(|si, ci| o[ci] = s[si]);
        }
        out
    }

    fn col2im<T: WithDType + AddAssign>(&self, src: &[T], batch: usize) -> Vec<T> {
        let (oh, ow) = self.out_dims();
        let img = self.channels * self.height * self.width;
        let cols = self.rows() * oh * ow;
        let mut out = vec![T::zero(); batch * img];
        for b in 0..batch {
            let s = &src[b * cols..(b + 1) * cols];
            let o = &mut out[b * img..(b + 1) * img];
            self.for_each_tap(|ii, ci| o[ii] += s[ci]);
        }
        out
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("kernel input must be contiguous"),
    }
}

pub(crate) struct Im2Col(pub Patches);
pub(crate) struct Col2Im(pub Patches);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = &self.0;
        let n = layout.dims()[0];
        let (oh, ow) = p.out_dims();
        let shape = Shape::from((n, p.rows(), oh * ow));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(p.im2col(contiguous(v, layout)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(p.im2col(contiguous(v, layout)?, n)),
            _ => candle_core::bail!("im2col supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let p = &self.0;
        let n = layout.dims()[0];
        let shape = Shape::from((n, p.channels, p.height, p.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(p.col2im(contiguous(v, layout)?, n)),
            CpuStorage::F64(v) => CpuStorage::F64(p.col2im(contiguous(v, layout)?, n)),
            _ => candle_core::bail!("col2im supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// Nearest-neighbour upsampling by integer factors.
pub(crate) struct Upsample {
    pub fh: usize,
    pub fw: usize,
}

fn upsample<T: WithDType>(src: &[T], planes: usize, h: usize, w: usize, fh: usize, fw: usize) -> Vec<T> {
    let (oh, ow) = (h * fh, w * fw);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut row = Vec::with_capacity(ow);
    for p in 0..planes {
        for r in 0..h {
            row.clear();
            for &v in &src[(p * h + r) * w..(p * h + r + 1) * w] {
                row.extend(std::iter::repeat_n(v, fw));
            }
            for _ in 0..fh {
                out.extend_from_slice(&row);
            }
        }
    }
    out
}

impl CustomOp1 for Upsample {
    fn name(&self) -> &'static str {
        "upsample_nearest"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = layout.shape().dims4()?;
        let shape = Shape::from((n, c, h * self.fh, w * self.fw));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(upsample(contiguous(v, layout)?, n * c, h, w, self.fh, self.fw)),
            CpuStorage::F64(v) => CpuStorage::F64(upsample(contiguous(v, layout)?, n * c, h, w, self.fh, self.fw)),
            _ => candle_core::bail!("upsample supports f32 and f64"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (n, c, h, w) = grad.dims4()?;
        let (fh, fw) = (self.fh, self.fw);
        let summed = grad.reshape((n, c, h / fh, fh, w / fw, fw))?.sum(5)?.sum(3)?;
        Ok(Some(summed))
    }
}
