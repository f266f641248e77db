//! Differentiable image and field operations on `(batch, channels, h, w)`
//! tensors: warping, bilinear resampling, SSIM, Sobel gradients and the
//! field smoothness penalty.
//!
//! Each op mirrors a reference implementation in `bsfa_core` so the two can
//! be checked against each other.

use bsfa_core::deformation::kernel::{warp_backward, warp_forward};
use bsfa_core::imaging::{axis_taps, gaussian_kernel, SsimParams};
use bsfa_core::Scale;
use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, WithDType, D};

use crate::error::{NetError, Result};

fn contiguous_slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("operand must be contiguous"),
    }
}

fn flat<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

/// Bilinear backward warp with border-clamped sampling coordinates.
struct WarpOp;

impl WarpOp {
    fn dims(src: &Layout, field: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = src.shape().dims4()?;
        let (fb, two, fh, fw) = field.shape().dims4()?;
        if fb != b || two != 2 || fh != h || fw != w {
            candle_core::bail!("warp: field {:?} does not match source {:?}", field.shape(), src.shape());
        }
        Ok((b, c, h, w))
    }

    fn forward<T: WithDType + num_traits::Float>(src: &[T], field: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
        let n = h * w;
        let mut out = vec![T::zero(); b * c * n];
        for i in 0..b {
            let f = &field[i * 2 * n..(i + 1) * 2 * n];
            warp_forward(
                &src[i * c * n..(i + 1) * c * n],
                c,
                h,
                w,
                &f[..n],
                &f[n..],
                &mut out[i * c * n..(i + 1) * c * n],
            );
        }
        out
    }

    fn backward<T: WithDType + num_traits::Float>(
        src: &Tensor,
        field: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Tensor, Tensor)> {
        let (b, c, h, w) = src.dims4()?;
        let n = h * w;
        let (s, f, g) = (flat::<T>(src)?, flat::<T>(field)?, flat::<T>(grad)?);
        let mut gs = vec![T::zero(); b * c * n];
        let mut gf = vec![T::zero(); b * 2 * n];
        for i in 0..b {
            let (gdx, gdy) = gf[i * 2 * n..(i + 1) * 2 * n].split_at_mut(n);
            let fi = &f[i * 2 * n..(i + 1) * 2 * n];
            warp_backward(
                &s[i * c * n..(i + 1) * c * n],
                c,
                h,
                w,
                &fi[..n],
                &fi[n..],
                &g[i * c * n..(i + 1) * c * n],
                &mut gs[i * c * n..(i + 1) * c * n],
                gdx,
                gdy,
            );
        }
        Ok((
            Tensor::from_vec(gs, (b, c, h, w), src.device())?,
            Tensor::from_vec(gf, (b, 2, h, w), src.device())?,
        ))
    }
}

impl CustomOp2 for WarpOp {
    fn name(&self) -> &'static str {
        "bilinear-warp"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = Self::dims(l1, l2)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(f)) => {
                CpuStorage::F32(Self::forward(contiguous_slice(a, l1)?, contiguous_slice(f, l2)?, b, c, h, w))
            }
            (CpuStorage::F64(a), CpuStorage::F64(f)) => {
                CpuStorage::F64(Self::forward(contiguous_slice(a, l1)?, contiguous_slice(f, l2)?, b, c, h, w))
            }
            _ => candle_core::bail!("warp supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, src: &Tensor, field: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (gs, gf) = match src.dtype() {
            DType::F32 => WarpOp::backward::<f32>(src, field, grad)?,
            DType::F64 => WarpOp::backward::<f64>(src, field, grad)?,
            dt => candle_core::bail!("warp backward: unsupported dtype {dt:?}"),
        };
        Ok((Some(gs), Some(gf)))
    }
}

/// `out(p) = src(p + field(p))`, bilinear, coordinates clamped to the image.
/// `src` is `(b, c, h, w)`, `field` is `(b, 2, h, w)` (x then y displacement).
pub fn warp(src: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = src.dims4()?;
    if field.dims() != [b, 2, h, w] {
        return Err(NetError::Shape(format!("warp field {:?} vs source {:?}", field.dims(), src.dims())));
    }
    Ok(src.contiguous()?.apply_op2(&field.contiguous()?, WarpOp)?)
}

/// Square root whose derivative is defined as zero at zero, so norms of
/// constant fields do not produce NaN gradients.
struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous_slice(v, l)?.iter().map(|x| x.max(0.0).sqrt()).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous_slice(v, l)?.iter().map(|x| x.max(0.0).sqrt()).collect()),
            _ => candle_core::bail!("safe-sqrt supports f32 or f64"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let live = arg.gt(0.0)?;
        let denom = live.where_cond(res, &res.ones_like()?)?;
        let g = (grad / denom)?.affine(0.5, 0.0)?;
        Ok(Some(live.where_cond(&g, &g.zeros_like()?)?))
    }
}

pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SafeSqrt)?)
}

fn taps_tensors(n_in: usize, n_out: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    let taps = axis_taps(n_in, n_out);
    let i0: Vec<u32> = taps.iter().map(|t| t.0 as u32).collect();
    let i1: Vec<u32> = taps.iter().map(|t| t.1 as u32).collect();
    let f: Vec<f64> = taps.iter().map(|t| t.2).collect();
    Ok((
        Tensor::new(i0, dev)?,
        Tensor::new(i1, dev)?,
        Tensor::new(f, dev)?.to_dtype(dtype)?,
    ))
}

fn resize_axis(x: &Tensor, dim: usize, n_out: usize) -> Result<Tensor> {
    let n_in = x.dim(dim)?;
    if n_in == n_out {
        return Ok(x.clone());
    }
    let (i0, i1, f) = taps_tensors(n_in, n_out, x.dtype(), x.device())?;
    let a = x.index_select(&i0, dim)?;
    let b = x.index_select(&i1, dim)?;
    let mut shape = vec![1usize; x.rank()];
    shape[dim] = n_out;
    let f = f.reshape(shape)?;
    Ok((&a + (b - &a)?.broadcast_mul(&f)?)?)
}

/// Bilinear resize of the two trailing axes (`align_corners = false`).
pub fn resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let r = x.rank();
    let y = resize_axis(x, r - 1, ow)?;
    resize_axis(&y, r - 2, oh)
}

/// Resample by a power of two; non-integral output sizes are rejected.
pub fn rescale(x: &Tensor, scale: Scale) -> Result<Tensor> {
    let r = x.rank();
    let (h, w) = (x.dim(r - 2)?, x.dim(r - 1)?);
    let (oh, ow) = (scale.apply(h)?, scale.apply(w)?);
    resize(x, oh, ow)
}

pub fn up2(x: &Tensor) -> Result<Tensor> {
    rescale(x, Scale::pow2(1))
}

/// Resamples a `(b, 2, h, w)` field and converts its displacements to pixels
/// of the new grid.
pub fn scale_field(field: &Tensor, scale: Scale) -> Result<Tensor> {
    Ok(rescale(field, scale)?.affine(scale.value(), 0.0)?)
}

/// `Σ_i scale_field(φ_i, 2^(K−1−i))` over levels given coarsest first.
pub fn accumulate_pyramid(levels: &[Tensor]) -> Result<Tensor> {
    let k = levels.len();
    if k == 0 {
        return Err(NetError::Config("empty field pyramid".into()));
    }
    let mut total: Option<Tensor> = None;
    for (i, phi) in levels.iter().enumerate() {
        let up = scale_field(phi, Scale::pow2((k - 1 - i) as i32))?;
        if let Some(t) = &total {
            if t.dims() != up.dims() {
                return Err(NetError::Shape(format!("level {i} field {:?} does not fit pyramid {:?}", phi.dims(), t.dims())));
            }
        }
        total = Some(match total {
            None => up,
            Some(t) => (t + up)?,
        });
    }
    Ok(total.unwrap())
}

/// 'Valid' correlation of the axis `dim` with `taps`, as shifted sums.
fn filter_axis_valid(x: &Tensor, dim: usize, taps: &[f64]) -> Result<Tensor> {
    let n = x.dim(dim)?;
    let out = n + 1 - taps.len();
    let mut acc: Option<Tensor> = None;
    for (i, &t) in taps.iter().enumerate().filter(|(_, &t)| t != 0.0) {
        let term = x.narrow(dim, i, out)?.affine(t, 0.0)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    acc.ok_or_else(|| NetError::Shape("filter has no non-zero taps".into()))
}

/// Separable Gaussian 'valid' filtering of every plane.
fn gaussian_valid(x: &Tensor, taps: &[f64]) -> Result<Tensor> {
    filter_axis_valid(&filter_axis_valid(x, 3, taps)?, 2, taps)
}

/// Mean SSIM over all valid window positions and the batch.
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(NetError::Shape(format!("ssim {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (_, _, h, w) = a.dims4()?;
    if h < p.window || w < p.window {
        return Err(NetError::Shape(format!("{h}x{w} is smaller than the SSIM window")));
    }
    let c = a.dim(1)?;
    let k = gaussian_kernel(p.window, p.sigma);
    let stats = gaussian_valid(&Tensor::cat(&[a, b, &a.sqr()?, &b.sqr()?, &(a * b)?], 1)?, &k)?;
    let part = |i: usize| stats.narrow(1, i * c, c);
    let (mu_a, mu_b, aa, bb, ab) = (part(0)?, part(1)?, part(2)?, part(3)?, part(4)?);
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let va = (aa - &mu_aa)?;
    let vb = (bb - &mu_bb)?;
    let cov = (ab - &mu_ab)?;
    let num = (mu_ab.affine(2.0, p.c1())? * cov.affine(2.0, p.c2())?)?;
    let den = ((mu_aa + mu_bb)?.affine(1.0, p.c1())? * (va + vb)?.affine(1.0, p.c2())?)?;
    Ok((num / den)?.mean_all()?)
}

/// `1 − ssim(a, b)`.
pub fn ssim_loss(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<Tensor> {
    Ok(ssim(a, b, p)?.affine(-1.0, 1.0)?)
}

/// Unnormalized 3x3 Sobel derivatives with replicate padding, `(gx, gy)`.
pub fn sobel(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let padded = x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?;
    let smooth = [1.0, 2.0, 1.0];
    let diff = [-1.0, 0.0, 1.0];
    let gx = filter_axis_valid(&filter_axis_valid(&padded, 3, &diff)?, 2, &smooth)?;
    let gy = filter_axis_valid(&filter_axis_valid(&padded, 3, &smooth)?, 2, &diff)?;
    Ok((gx, gy))
}

/// Per-pixel Sobel magnitude.
pub fn gradient_magnitude(x: &Tensor) -> Result<Tensor> {
    let (gx, gy) = sobel(x)?;
    safe_sqrt(&(gx.sqr()? + gy.sqr()?)?)
}

/// Forward difference along `dim`, zero past the last element.
fn forward_diff(x: &Tensor, dim: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    if n < 2 {
        return Ok(x.zeros_like()?);
    }
    let d = (x.narrow(dim, 1, n - 1)? - x.narrow(dim, 0, n - 1)?)?;
    Ok(d.pad_with_zeros(dim, 0, 1)?)
}

/// Mean per-pixel Frobenius norm of the forward-difference Jacobian of a
/// `(b, 2, h, w)` field.
pub fn field_gradient_norm(field: &Tensor) -> Result<Tensor> {
    let dxs = forward_diff(field, 3)?;
    let dys = forward_diff(field, 2)?;
    let sq = (dxs.sqr()? + dys.sqr()?)?.sum_keepdim(1)?;
    Ok(safe_sqrt(&sq)?.mean_all()?)
}

/// `Σ_i 10^(i−K) (‖∇φ_A^i‖ + ‖∇φ_B^i‖)` with levels coarsest first.
pub fn smoothness_loss(phi_a: &[Tensor], phi_b: &[Tensor]) -> Result<Tensor> {
    if phi_a.len() != phi_b.len() || phi_a.is_empty() {
        return Err(NetError::Shape(format!("{} forward vs {} reverse levels", phi_a.len(), phi_b.len())));
    }
    let k = phi_a.len() as i32;
    let mut total: Option<Tensor> = None;
    for (i, (a, b)) in phi_a.iter().zip(phi_b).enumerate() {
        let wgt = 10f64.powi(i as i32 + 1 - k);
        let term = (field_gradient_norm(a)? + field_gradient_norm(b)?)?.affine(wgt, 0.0)?;
        total = Some(match total {
            None => term,
            Some(t) => (t + term)?,
        });
    }
    Ok(total.unwrap())
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Log-softmax over the last axis.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let s = x.broadcast_sub(&m)?;
    let lse = s.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(s.broadcast_sub(&lse)?)
}

/// Leaky rectifier with slope 0.2.
pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(0.2, 0.0)?)?)
}

/// Reads a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
