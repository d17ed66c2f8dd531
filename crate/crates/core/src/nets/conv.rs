//! Bias-free 2-D convolution as im2col + SGEMM with a matching backward pass.
//!
//! candle's CPU convolution backward goes through a direct transposed
//! convolution that is several times slower than the forward pass. Training
//! the standalone classifier on CPU is dominated by that backward pass, so the
//! classifier backbone uses this op instead.

use candle_core::{CpuStorage, CustomOp2, Layout, Module, Shape, Tensor};
use candle_nn::{Init, VarBuilder};

use crate::gemm::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], wt: &[usize], stride: usize, padding: usize) -> candle_core::Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, k, k2]) = (x, wt) else {
            candle_core::bail!("conv expects 4-D input and kernel, got {x:?} and {wt:?}");
        };
        if wcin != cin || k != k2 {
            candle_core::bail!("conv kernel {wt:?} does not fit input {x:?}");
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            candle_core::bail!("conv kernel {k} larger than padded input {h}x{w}");
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            padding,
            oh: (h + 2 * padding - k) / stride + 1,
            ow: (w + 2 * padding - k) / stride + 1,
        })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }

    /// (input row, input col) for output pixel (oy, ox) and kernel tap (ky, kx), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy as usize >= self.h || ix as usize >= self.w {
            None
        } else {
            Some((iy as usize, ix as usize))
        }
    }

    fn im2col(&self, image: &[f32], cols: &mut [f32]) {
        let px = self.out_px();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * px;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row + oy * self.ow + ox] = match self.source(oy, ox, ky, kx) {
                                Some((iy, ix)) => image[(c * self.h + iy) * self.w + ix],
                                None => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f32], image: &mut [f32]) {
        let px = self.out_px();
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = ((c * self.k + ky) * self.k + kx) * px;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((iy, ix)) = self.source(oy, ox, ky, kx) {
                                image[(c * self.h + iy) * self.w + ix] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous_slice<'a>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [f32]> {
    let data = s.as_slice::<f32>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("gemm conv requires contiguous f32 operands"),
    }
}

fn forward_values(g: &Geometry, x: &[f32], wt: &[f32]) -> Vec<f32> {
    let (px, patch) = (g.out_px(), g.patch());
    let mut out = vec![0.0f32; g.n * g.cout * px];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![0.0f32; patch * px] };
    for i in 0..g.n {
        let image = &x[i * g.cin * g.h * g.w..(i + 1) * g.cin * g.h * g.w];
        let y = &mut out[i * g.cout * px..(i + 1) * g.cout * px];
        if g.pointwise() {
            gemm(g.cout, patch, px, wt, false, image, false, 0.0, y);
        } else {
            g.im2col(image, &mut cols);
            gemm(g.cout, patch, px, wt, false, &cols, false, 0.0, y);
        }
    }
    out
}

struct ConvOp {
    stride: usize,
    padding: usize,
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "gemm-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.padding)?;
        let out = forward_values(&g, contiguous_slice(s1, l1)?, contiguous_slice(s2, l2)?);
        Ok((CpuStorage::F32(out), Shape::from((g.n, g.cout, g.oh, g.ow))))
    }

    fn bwd(&self, x: &Tensor, wt: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geometry::new(x.dims(), wt.dims(), self.stride, self.padding)?;
        let xs = x.flatten_all()?.to_vec1::<f32>()?;
        let ws = wt.flatten_all()?.to_vec1::<f32>()?;
        let gs = grad.contiguous()?.flatten_all()?.to_vec1::<f32>()?;
        let (px, patch, img) = (g.out_px(), g.patch(), g.cin * g.h * g.w);
        let mut dx = vec![0.0f32; g.n * img];
        let mut dw = vec![0.0f32; g.cout * patch];
        let mut cols = vec![0.0f32; patch * px];
        for i in 0..g.n {
            let dy = &gs[i * g.cout * px..(i + 1) * g.cout * px];
            let image = &xs[i * img..(i + 1) * img];
            if g.pointwise() {
                gemm(g.cout, px, patch, dy, false, image, true, 1.0, &mut dw);
                gemm(patch, g.cout, px, &ws, true, dy, false, 0.0, &mut dx[i * img..(i + 1) * img]);
            } else {
                g.im2col(image, &mut cols);
                gemm(g.cout, px, patch, dy, false, &cols, true, 1.0, &mut dw);
                gemm(patch, g.cout, px, &ws, true, dy, false, 0.0, &mut cols);
                g.col2im_add(&cols, &mut dx[i * img..(i + 1) * img]);
            }
        }
        let dx = Tensor::from_vec(dx, x.shape(), x.device())?;
        let dw = Tensor::from_vec(dw, wt.shape(), wt.device())?;
        Ok((Some(dx), Some(dw)))
    }
}

/// Bias-free convolution layer with the same parameter layout as `candle_nn::Conv2d`.
#[derive(Clone, Debug)]
pub struct GemmConv2d {
    weight: Tensor,
    stride: usize,
    padding: usize,
}

impl GemmConv2d {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let weight = vb.get_with_hints((cout, cin, k, k), "weight", Init::Kaiming {
            dist: candle_nn::init::NormalOrUniform::Normal,
            fan: candle_nn::init::FanInOut::FanOut,
            non_linearity: candle_nn::init::NonLinearity::ReLU,
        })?;
        Ok(Self { weight, stride, padding })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for GemmConv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.contiguous()?.apply_op2(&self.weight.contiguous()?, ConvOp { stride: self.stride, padding: self.padding })
    }
}
