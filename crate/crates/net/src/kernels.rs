//! CPU kernels with hand-written backward passes for the convolution-style
//! layers: dense convolution lowered to one matrix product, depthwise 3x3
//! convolution and per-channel affine maps.

use candle_core::{CpuStorage, CustomOp3, DType, Device, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

use crate::error::{NetError, Result};

fn slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("operand must be contiguous"),
    }
}

fn flat<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Convolution geometry: square kernel `k`, stride and zero padding.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    b: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &Shape, wt: &Shape, stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (b, c_in, h, w) = x.dims4()?;
        let (c_out, wc, k, k2) = wt.dims4()?;
        if wc != c_in || k != k2 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            candle_core::bail!("conv: input {x:?} and kernel {wt:?} (stride {stride}, padding {pad}) do not fit");
        }
        Ok(Self {
            b,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.b * self.oh * self.ow
    }

    /// Output columns `[x0, x1)` of a patch row whose tap offset is `d`, and
    /// the first source column, for a line of length `n`.
    fn span(&self, d: usize, n: usize, out: usize) -> (usize, usize, usize) {
        // Output o reads source o*stride + d - pad.
        let x0 = self.pad.saturating_sub(d).div_ceil(self.stride);
        let x1 = if n + self.pad > d { ((n + self.pad - d - 1) / self.stride + 1).min(out) } else { 0 };
        (x0, x1.max(x0), (x0 * self.stride + d).saturating_sub(self.pad))
    }

    /// Calls `f(r, j, s, len)` for every run of `len` output columns starting
    /// at column `j` of patch row `r`, reading source elements `s, s+stride, …`.
    fn runs(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let p = self.oh * self.ow;
        let kk = self.k * self.k;
        for ci in 0..self.c_in {
            for t in 0..kk {
                let (dy, dx) = (t / self.k, t % self.k);
                let r = ci * kk + t;
                let (y0, y1, sy0) = self.span(dy, self.h, self.oh);
                let (x0, x1, sx0) = self.span(dx, self.w, self.ow);
                if x1 == x0 {
                    continue;
                }
                for bi in 0..self.b {
                    let plane = (bi * self.c_in + ci) * self.h * self.w;
                    for (i, oy) in (y0..y1).enumerate() {
                        let sy = sy0 + i * self.stride;
                        f(r, bi * p + oy * self.ow + x0, plane + sy * self.w + sx0, x1 - x0);
                    }
                }
            }
        }
    }

    fn im2col<T: WithDType + Float>(&self, x: &[T]) -> Vec<T> {
        let n = self.cols();
        let st = self.stride;
        let mut cols = vec![T::zero(); self.rows() * n];
        self.runs(|r, j, s, len| {
            let dst = &mut cols[r * n + j..r * n + j + len];
            if st == 1 {
                dst.copy_from_slice(&x[s..s + len]);
            } else {
                for (i, d) in dst.iter_mut().enumerate() {
                    *d = x[s + i * st];
                }
            }
        });
        cols
    }

    fn col2im<T: WithDType + Float>(&self, cols: &[T], out: &mut [T]) {
        let n = self.cols();
        let st = self.stride;
        self.runs(|r, j, s, len| {
            let src = &cols[r * n + j..r * n + j + len];
            if st == 1 {
                for (o, v) in out[s..s + len].iter_mut().zip(src) {
                    *o = *o + *v;
                }
            } else {
                for (i, v) in src.iter().enumerate() {
                    out[s + i * st] = out[s + i * st] + *v;
                }
            }
        });
    }
}

struct Conv {
    stride: usize,
    pad: usize,
}

impl Conv {
    fn forward<T: WithDType + Float>(g: &Geometry, x: &[T], wt: &[T], bias: &[T]) -> candle_core::Result<Vec<T>> {
        let dev = Device::Cpu;
        let cols = Tensor::from_vec(g.im2col(x), (g.rows(), g.cols()), &dev)?;
        let wm = Tensor::from_slice(wt, (g.c_out, g.rows()), &dev)?;
        let prod = flat::<T>(&wm.matmul(&cols)?)?;
        let p = g.oh * g.ow;
        let mut out = vec![T::zero(); g.b * g.c_out * p];
        for co in 0..g.c_out {
            let src = &prod[co * g.cols()..(co + 1) * g.cols()];
            for bi in 0..g.b {
                let dst = &mut out[(bi * g.c_out + co) * p..(bi * g.c_out + co + 1) * p];
                for (d, s) in dst.iter_mut().zip(&src[bi * p..(bi + 1) * p]) {
                    *d = *s + bias[co];
                }
            }
        }
        Ok(out)
    }

    fn backward<T: WithDType + Float>(
        &self,
        x: &Tensor,
        wt: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let g = Geometry::new(x.shape(), wt.shape(), self.stride, self.pad)?;
        let dev = Device::Cpu;
        let (xs, ws, gs) = (flat::<T>(x)?, flat::<T>(wt)?, flat::<T>(grad)?);
        let p = g.oh * g.ow;
        let n = g.cols();
        let mut gmat = vec![T::zero(); g.c_out * n];
        let mut gb = vec![T::zero(); g.c_out];
        for bi in 0..g.b {
            for co in 0..g.c_out {
                let src = &gs[(bi * g.c_out + co) * p..(bi * g.c_out + co + 1) * p];
                gmat[co * n + bi * p..co * n + (bi + 1) * p].copy_from_slice(src);
                gb[co] = src.iter().fold(gb[co], |a, &v| a + v);
            }
        }
        let gm = Tensor::from_vec(gmat, (g.c_out, n), &dev)?;
        let cols = Tensor::from_vec(g.im2col(&xs), (g.rows(), n), &dev)?;
        let wm = Tensor::from_vec(ws, (g.c_out, g.rows()), &dev)?;
        let gw = gm.matmul(&cols.t()?)?.reshape(wt.shape())?;
        let gcols = flat::<T>(&wm.t()?.matmul(&gm)?)?;
        let mut gx = vec![T::zero(); xs.len()];
        g.col2im(&gcols, &mut gx);
        Ok((
            Tensor::from_vec(gx, x.shape(), x.device())?,
            gw.to_device(wt.device())?,
            Tensor::from_vec(gb, g.c_out, wt.device())?,
        ))
    }
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.shape(), l2.shape(), self.stride, self.pad)?;
        if l3.shape().dims() != [g.c_out] {
            candle_core::bail!("conv: bias {:?} does not match {} outputs", l3.shape(), g.c_out);
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                CpuStorage::F32(Self::forward(&g, slice(x, l1)?, slice(w, l2)?, slice(b, l3)?)?)
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                CpuStorage::F64(Self::forward(&g, slice(x, l1)?, slice(w, l2)?, slice(b, l3)?)?)
            }
            _ => candle_core::bail!("conv supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((g.b, g.c_out, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        wt: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gx, gw, gb) = match x.dtype() {
            DType::F32 => self.backward::<f32>(x, wt, grad)?,
            DType::F64 => self.backward::<f64>(x, wt, grad)?,
            dt => candle_core::bail!("conv backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Dense 2D convolution (cross-correlation) of `(b, c_in, h, w)` with
/// `(c_out, c_in, k, k)` weights and a `(c_out)` bias.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(
        &weight.contiguous()?,
        &bias.contiguous()?,
        Conv { stride, pad: padding },
    )?)
}

struct Depthwise3;

impl Depthwise3 {
    /// For tap offset `d ∈ {0, 1, 2}` on a line of length `n`: output range
    /// `[o0, o1)` reads source index `o + d − 1`.
    fn span(d: usize, n: usize) -> (usize, usize) {
        match d {
            0 => (1, n),
            1 => (0, n),
            _ => (0, n - 1),
        }
    }

    /// Calls `f(channel, tap, src_start, out_start, len)` for every run of
    /// in-bounds taps along a row.
    fn runs(b: usize, c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let n = h * w;
        for plane in 0..b * c {
            let ch = plane % c;
            let base = plane * n;
            for t in 0..9 {
                let (dy, dx) = (t / 3, t % 3);
                let (y0, y1) = Self::span(dy, h);
                let (x0, x1) = Self::span(dx, w);
                if x1 <= x0 {
                    continue;
                }
                for y in y0..y1 {
                    let sy = y + dy - 1;
                    f(ch, t, base + sy * w + x0 + dx - 1, base + y * w + x0, x1 - x0);
                }
            }
        }
    }

    fn forward<T: WithDType + Float>(x: &[T], wt: &[T], bias: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
        let (b, c, h, w) = dims;
        let n = h * w;
        let mut out: Vec<T> = (0..b * c * n).map(|i| bias[(i / n) % c]).collect();
        Self::runs(b, c, h, w, |ch, t, s, o, len| {
            let wk = wt[t * c + ch];
            for (d, v) in out[o..o + len].iter_mut().zip(&x[s..s + len]) {
                *d = *d + wk * *v;
            }
        });
        out
    }

    fn backward<T: WithDType + Float>(x: &Tensor, wt: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let (xs, ws, gs) = (flat::<T>(x)?, flat::<T>(wt)?, flat::<T>(grad)?);
        let mut gx = vec![T::zero(); xs.len()];
        let mut gw = vec![T::zero(); 9 * c];
        let mut gb = vec![T::zero(); c];
        for (plane, chunk) in gs.chunks_exact(n).enumerate() {
            let ch = plane % c;
            gb[ch] = chunk.iter().fold(gb[ch], |a, &v| a + v);
        }
        Self::runs(b, c, h, w, |ch, t, s, o, len| {
            let wk = ws[t * c + ch];
            let g = &gs[o..o + len];
            let mut acc = T::zero();
            for ((d, v), gv) in gx[s..s + len].iter_mut().zip(&xs[s..s + len]).zip(g) {
                *d = *d + wk * *gv;
                acc = acc + *gv * *v;
            }
            gw[t * c + ch] = gw[t * c + ch] + acc;
        });
        Ok((
            Tensor::from_vec(gx, (b, c, h, w), x.device())?,
            Tensor::from_vec(gw, (9, c), x.device())?,
            Tensor::from_vec(gb, c, x.device())?,
        ))
    }
}

impl CustomOp3 for Depthwise3 {
    fn name(&self) -> &'static str {
        "depthwise-3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let c = dims.1;
        if l2.shape().dims() != [9, c] || l3.shape().dims() != [c] {
            candle_core::bail!("depthwise weights {:?} / bias {:?} do not match {c} channels", l2.shape(), l3.shape());
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(k), CpuStorage::F32(bias)) => {
                CpuStorage::F32(Self::forward(slice(x, l1)?, slice(k, l2)?, slice(bias, l3)?, dims))
            }
            (CpuStorage::F64(x), CpuStorage::F64(k), CpuStorage::F64(bias)) => {
                CpuStorage::F64(Self::forward(slice(x, l1)?, slice(k, l2)?, slice(bias, l3)?, dims))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        wt: &Tensor,
        _bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gx, gw, gb) = match x.dtype() {
            DType::F32 => Self::backward::<f32>(x, wt, grad)?,
            DType::F64 => Self::backward::<f64>(x, wt, grad)?,
            dt => candle_core::bail!("depthwise backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw), Some(gb)))
    }
}

/// Depthwise 3x3 convolution with zero padding. `weight` is `(9, c)` with
/// tap `t` at offset `(t / 3 − 1, t % 3 − 1)`; `bias` is `(c)`.
pub fn depthwise3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op3(&weight.contiguous()?, &bias.contiguous()?, Depthwise3)?)
}

struct ChannelAffine;

impl ChannelAffine {
    fn forward<T: WithDType + Float>(x: &[T], scale: &[T], shift: &[T], c: usize, n: usize) -> Vec<T> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / n) % c;
                v * scale[ch] + shift[ch]
            })
            .collect()
    }

    fn backward<T: WithDType + Float>(x: &Tensor, scale: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        let n = h * w;
        let (xs, ss, gs) = (flat::<T>(x)?, flat::<T>(scale)?, flat::<T>(grad)?);
        let mut gx = vec![T::zero(); xs.len()];
        let mut gscale = vec![T::zero(); c];
        let mut gshift = vec![T::zero(); c];
        for (i, (&g, &v)) in gs.iter().zip(&xs).enumerate() {
            let ch = (i / n) % c;
            gx[i] = g * ss[ch];
            gscale[ch] = gscale[ch] + g * v;
            gshift[ch] = gshift[ch] + g;
        }
        Ok((
            Tensor::from_vec(gx, x.shape(), x.device())?,
            Tensor::from_vec(gscale, c, x.device())?,
            Tensor::from_vec(gshift, c, x.device())?,
        ))
    }
}

impl CustomOp3 for ChannelAffine {
    fn name(&self) -> &'static str {
        "channel-affine"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, h, w) = l1.shape().dims4()?;
        if l2.shape().dims() != [c] || l3.shape().dims() != [c] {
            candle_core::bail!("channel affine parameters {:?} / {:?} do not match {c} channels", l2.shape(), l3.shape());
        }
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32(Self::forward(slice(x, l1)?, slice(a, l2)?, slice(b, l3)?, c, h * w))
            }
            (CpuStorage::F64(x), CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64(Self::forward(slice(x, l1)?, slice(a, l2)?, slice(b, l3)?, c, h * w))
            }
            _ => candle_core::bail!("channel affine supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        _shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (gx, ga, gb) = match x.dtype() {
            DType::F32 => Self::backward::<f32>(x, scale, grad)?,
            DType::F64 => Self::backward::<f64>(x, scale, grad)?,
            dt => candle_core::bail!("channel affine backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(ga), Some(gb)))
    }
}

/// `x · scale[c] + shift[c]` for `(b, c, h, w)` inputs.
pub fn channel_affine(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if scale.dims() != [c] || shift.dims() != [c] {
        return Err(NetError::Shape(format!(
            "channel affine {:?} / {:?} for {:?}",
            scale.dims(),
            shift.dims(),
            x.dims()
        )));
    }
    Ok(x.contiguous()?.apply_op3(&scale.contiguous()?, &shift.contiguous()?, ChannelAffine)?)
}
