//! Multi-scale fusion of aligned features, reconstruction of the fused image
//! and the structure, intensity and gradient losses.

use bsfa_core::imaging::SsimParams;
use bsfa_core::Scale;
use candle_core::Tensor;

use crate::config::ModelConfig;
use crate::error::{NetError, Result};
use crate::layers::{Conv2d, RestormerBlock};
use crate::ops::{gradient_magnitude, l1, rescale, scale_field, ssim_loss, up2, warp};
use crate::params::{ParamStore, Path};

/// One FusionBLK: project `concat(A-stream, B-stream, G_prev)`, refine with
/// a Restormer block, then upsample ×2 unless it is the last block.
#[derive(Debug, Clone)]
pub struct FusionBlock {
    proj: Conv2d,
    body: RestormerBlock,
}

impl FusionBlock {
    pub fn new(ps: &mut ParamStore, p: &Path, width: usize, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(ps, &p.push("proj"), 2 * width + channels, channels, 1, 1)?,
            body: RestormerBlock::new(ps, &p.push("restormer"), channels, heads)?,
        })
    }

    /// Block `i` of `j` (1-based). `map_a`/`map_b` are the token maps at the
    /// coarsest grid; `phi_ab` is the full-resolution field.
    pub fn forward(&self, map_a: &Tensor, map_b: &Tensor, phi_ab: &Tensor, g_prev: &Tensor, i: usize, j: usize) -> Result<Tensor> {
        let up = Scale::pow2(i as i32 - 1);
        let a = rescale(map_a, up)?;
        let b = rescale(map_b, up)?;
        let field = scale_field(phi_ab, Scale::pow2(-((j - i) as i32)))?;
        if field.dims()[2..] != a.dims()[2..] || g_prev.dims()[2..] != a.dims()[2..] {
            return Err(NetError::Shape(format!(
                "fusion block {i}: streams {:?}, field {:?}, state {:?}",
                a.dims(),
                field.dims(),
                g_prev.dims()
            )));
        }
        let a = warp(&a, &field)?;
        let x = self.proj.forward(&Tensor::cat(&[&a, &b, g_prev], 1)?)?;
        let g = self.body.forward(&x)?;
        if i < j {
            up2(&g)
        } else {
            Ok(g)
        }
    }
}

/// The fusion stack plus reconstruction head.
#[derive(Debug, Clone)]
pub struct Mmff {
    blocks: Vec<FusionBlock>,
    recon_proj: Conv2d,
    recon_body: RestormerBlock,
    recon_out: Conv2d,
    channels: usize,
}

impl Mmff {
    pub fn new(ps: &mut ParamStore, p: &Path, cfg: &ModelConfig) -> Result<Self> {
        let cf = cfg.fusion_channels;
        Ok(Self {
            blocks: (1..=cfg.fusion_blocks)
                .map(|i| FusionBlock::new(ps, &p.push(format!("block{i}")), cfg.token_width, cf, cfg.restormer_heads))
                .collect::<Result<_>>()?,
            recon_proj: Conv2d::new(ps, &p.push("recon_proj"), cf + 2 * cfg.base_channels, cf, 1, 1)?,
            recon_body: RestormerBlock::new(ps, &p.push("recon_restormer"), cf, cfg.restormer_heads)?,
            recon_out: Conv2d::new(ps, &p.push("recon_out"), cf, 1, 1, 1)?,
            channels: cf,
        })
    }

    /// Runs all blocks and returns `G^J`. Token maps from a `K`-level encoder
    /// are resampled to the `J`-block starting grid when `K ≠ J`.
    pub fn fuse_features(&self, map_a: &Tensor, map_b: &Tensor, phi_ab: &Tensor) -> Result<Tensor> {
        let j = self.blocks.len();
        let (b, _, h, w) = phi_ab.dims4()?;
        let (gh, gw) = (h >> (j - 1), w >> (j - 1));
        if gh << (j - 1) != h || gw << (j - 1) != w {
            return Err(NetError::Shape(format!("{h}x{w} is not divisible by 2^{}", j - 1)));
        }
        let fit = |m: &Tensor| -> Result<Tensor> {
            let (_, _, mh, mw) = m.dims4()?;
            if (mh, mw) == (gh, gw) {
                Ok(m.clone())
            } else {
                crate::ops::resize(m, gh, gw)
            }
        };
        let (ma, mb) = (fit(map_a)?, fit(map_b)?);
        let mut g = Tensor::zeros((b, self.channels, gh, gw), phi_ab.dtype(), phi_ab.device())?;
        for (idx, blk) in self.blocks.iter().enumerate() {
            g = blk.forward(&ma, &mb, phi_ab, &g, idx + 1, j)?;
        }
        Ok(g)
    }

    /// `sigmoid(conv(Restormer(proj(concat(G^J, F_B^s, W(F_A^s, φ))))))`.
    pub fn reconstruct(&self, g: &Tensor, shallow_a: &Tensor, shallow_b: &Tensor, phi_ab: &Tensor) -> Result<Tensor> {
        let aligned = warp(shallow_a, phi_ab)?;
        let x = self.recon_proj.forward(&Tensor::cat(&[g, shallow_b, &aligned], 1)?)?;
        let x = self.recon_body.forward(&x)?;
        let z = self.recon_out.forward(&x)?;
        Ok((z.neg()?.exp()? + 1.0)?.recip()?)
    }
}

/// The three fusion losses.
#[derive(Debug, Clone)]
pub struct FusionLosses {
    pub structure: Tensor,
    pub intensity: Tensor,
    pub gradient: Tensor,
    /// `1 − ssim(I_fuse, Ĩ_A)` and `1 − ssim(I_fuse, I_B)`, the μ inputs.
    pub ssim_loss_a: Tensor,
    pub ssim_loss_b: Tensor,
}

/// Structure loss `L_ssim(F, Ĩ_A) + μ L_ssim(F, I_B)`, intensity loss
/// `‖F − max(Ĩ_A, I_B)‖₁` and gradient loss `‖∇F − max(∇Ĩ_A, ∇I_B)‖₁`.
pub fn fusion_losses(fused: &Tensor, warped_a: &Tensor, ref_b: &Tensor, mu: f64, p: &SsimParams) -> Result<FusionLosses> {
    if fused.dims() != warped_a.dims() || fused.dims() != ref_b.dims() {
        return Err(NetError::Shape(format!(
            "fusion losses {:?}, {:?}, {:?}",
            fused.dims(),
            warped_a.dims(),
            ref_b.dims()
        )));
    }
    let la = ssim_loss(fused, warped_a, p)?;
    let lb = ssim_loss(fused, ref_b, p)?;
    let structure = (&la + lb.affine(mu, 0.0)?)?;
    let intensity = l1(fused, &warped_a.maximum(ref_b)?)?;
    let gmax = gradient_magnitude(warped_a)?.maximum(&gradient_magnitude(ref_b)?)?;
    let gradient = l1(&gradient_magnitude(fused)?, &gmax)?;
    Ok(FusionLosses {
        structure,
        intensity,
        gradient,
        ssim_loss_a: la,
        ssim_loss_b: lb,
    })
}
