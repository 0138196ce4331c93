//! Sliding-window unfold (im2col) and its adjoint fold (col2im) as custom
//! autograd ops. `same` zero padding, square kernels, any dilation.

use std::ops::AddAssign;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

/// `B x C x H x W` to `B x (C k k) x (H W)`; row `c k² + ky k + kx` holds the
/// input shifted by `(ky, kx)` taps.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Unfold {
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy)]
struct Fold {
    kernel: usize,
    dilation: usize,
    channels: usize,
    height: usize,
    width: usize,
}

/// Column range `[x0, x1)` whose shifted source `x + off` lies in `0..w`.
fn valid_span(w: usize, off: isize) -> (usize, usize) {
    let x0 = (-off).max(0) as usize;
    let x1 = (w as isize - off).clamp(0, w as isize) as usize;
    (x0.min(x1), x1)
}

fn unfold_impl<T: Copy + Default>(src: &[T], dims: (usize, usize, usize, usize), k: usize, d: usize) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (hw, kk) = (h * w, k * k);
    let pad = (d * (k - 1) / 2) as isize;
    let mut out = vec![T::default(); b * c * kk * hw];
    for n in 0..b {
        for ch in 0..c {
            let plane = &src[(n * c + ch) * hw..][..hw];
            for ky in 0..k {
                let oy = (ky * d) as isize - pad;
                for kx in 0..k {
                    let ox = (kx * d) as isize - pad;
                    let row = ((n * c + ch) * kk + ky * k + kx) * hw;
                    let dst = &mut out[row..row + hw];
                    let (x0, x1) = valid_span(w, ox);
                    if x0 == x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let s = sy as usize * w;
                        dst[y * w + x0..y * w + x1]
                            .copy_from_slice(&plane[(s as isize + x0 as isize + ox) as usize..][..x1 - x0]);
                    }
                }
            }
        }
    }
    out
}

fn fold_impl<T: Copy + Default + AddAssign>(cols: &[T], dims: (usize, usize, usize, usize), k: usize, d: usize) -> Vec<T> {
    let (b, c, h, w) = dims;
    let (hw, kk) = (h * w, k * k);
    let pad = (d * (k - 1) / 2) as isize;
    let mut out = vec![T::default(); b * c * hw];
    for n in 0..b {
        for ch in 0..c {
            let plane = &mut out[(n * c + ch) * hw..][..hw];
            for ky in 0..k {
                let oy = (ky * d) as isize - pad;
                for kx in 0..k {
                    let ox = (kx * d) as isize - pad;
                    let row = ((n * c + ch) * kk + ky * k + kx) * hw;
                    let src = &cols[row..row + hw];
                    let (x0, x1) = valid_span(w, ox);
                    if x0 == x1 {
                        continue;
                    }
                    for y in 0..h {
                        let sy = y as isize + oy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let base = (sy as usize * w) as isize + ox;
                        for x in x0..x1 {
                            plane[(base + x as isize) as usize] += src[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("unfold/fold expect a contiguous input"),
    }
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let (b, c, h, w) = dims;
        let (k, d) = (self.kernel, self.dilation);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold_impl(contiguous(v, layout)?, dims, k, d)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold_impl(contiguous(v, layout)?, dims, k, d)),
            other => candle_core::bail!("unfold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from((b, c * k * k, h * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, channels, height, width) = arg.dims4()?;
        let fold = Fold {
            kernel: self.kernel,
            dilation: self.dilation,
            channels,
            height,
            width,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(fold)?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, _) = layout.shape().dims3()?;
        let dims = (b, self.channels, self.height, self.width);
        let (k, d) = (self.kernel, self.dilation);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold_impl(contiguous(v, layout)?, dims, k, d)),
            CpuStorage::F64(v) => CpuStorage::F64(fold_impl(contiguous(v, layout)?, dims, k, d)),
            other => candle_core::bail!("fold: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, Shape::from(dims)))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let unfold = Unfold {
            kernel: self.kernel,
            dilation: self.dilation,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1(unfold)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn shifted_views(x: &Tensor, k: usize, d: usize) -> Tensor {
        let (b, c, h, w) = x.dims4().unwrap();
        let pad = d * (k - 1) / 2;
        let xp = x.pad_with_zeros(2, pad, pad).unwrap().pad_with_zeros(3, pad, pad).unwrap();
        let mut views = Vec::new();
        for ky in 0..k {
            for kx in 0..k {
                views.push(xp.narrow(2, ky * d, h).unwrap().narrow(3, kx * d, w).unwrap());
            }
        }
        Tensor::stack(&views, 2).unwrap().reshape((b, c * k * k, h * w)).unwrap()
    }

    #[test]
    fn matches_padded_shift_reference() {
        let x = Tensor::arange(0f64, 2.0 * 3.0 * 5.0 * 6.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 5, 6))
            .unwrap();
        for (k, d) in [(3, 1), (3, 2), (1, 1), (3, 4)] {
            let got = x.apply_op1(Unfold { kernel: k, dilation: d }).unwrap();
            let want = shifted_views(&x, k, d);
            assert_eq!(got.to_vec3::<f64>().unwrap(), want.to_vec3::<f64>().unwrap(), "k={k} d={d}");
        }
    }

    #[test]
    fn fold_is_the_adjoint() {
        let x = Var::from_tensor(
            &Tensor::arange(0f64, 48.0, &Device::Cpu).unwrap().reshape((1, 3, 4, 4)).unwrap(),
        )
        .unwrap();
        let weights = Tensor::arange(0f64, 27.0 * 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 27, 16))
            .unwrap();
        let y = x.as_tensor().apply_op1(Unfold { kernel: 3, dilation: 2 }).unwrap();
        let g = (y * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let ours = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();

        let reference = shifted_views(x.as_tensor(), 3, 2);
        let g = (reference * &weights).unwrap().sum_all().unwrap().backward().unwrap();
        let theirs = g.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(ours, theirs);
    }
}
