//! Bidirectional stepwise feature alignment: per-level forward and reverse
//! registration layers, final field assembly and the consistency loss.

use bsfa_core::imaging::SsimParams;
use candle_core::Tensor;

use crate::config::{BsfaMode, ModelConfig};
use crate::error::{NetError, Result};
use crate::layers::Conv2d;
use crate::ops::{accumulate_pyramid, l1, leaky_relu, ssim_loss, up2, warp};
use crate::params::{ParamStore, Path};

/// One registration layer (FRL or RRL) at one level.
///
/// `concat(F_A, F_B, D_prev)` is squeezed by a 1x1 convolution, passed
/// through two 3x3 conv + leaky layers, then split into a zero-initialized
/// 2-channel field head and a `W′`-channel state head.
#[derive(Debug, Clone)]
pub struct RegLayer {
    squeeze: Conv2d,
    conv1: Conv2d,
    conv2: Conv2d,
    phi: Conv2d,
    state: Conv2d,
    width: usize,
}

impl RegLayer {
    pub fn new(ps: &mut ParamStore, p: &Path, width: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            squeeze: Conv2d::new(ps, &p.push("squeeze"), 3 * width, hidden, 1, 1)?,
            conv1: Conv2d::new(ps, &p.push("conv1"), hidden, hidden, 3, 1)?,
            conv2: Conv2d::new(ps, &p.push("conv2"), hidden, hidden, 3, 1)?,
            phi: Conv2d::zeroed(ps, &p.push("phi"), hidden, 2, 3)?,
            state: Conv2d::new(ps, &p.push("state"), hidden, width, 3, 1)?,
            width,
        })
    }

    /// `f_cat` is `(b, 2W′, h, w)`, `d_prev` is `(b, W′, h, w)`; returns
    /// `(φ, D_next)`.
    pub fn forward(&self, f_cat: &Tensor, d_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = f_cat.dims4()?;
        if c != 2 * self.width || d_prev.dims() != [b, self.width, h, w] {
            return Err(NetError::Shape(format!(
                "registration layer inputs {:?} and {:?} do not share a {}-wide grid",
                f_cat.dims(),
                d_prev.dims(),
                self.width
            )));
        }
        let x = self.squeeze.forward(&Tensor::cat(&[f_cat, d_prev], 1)?)?;
        let x = leaky_relu(&self.conv1.forward(&x)?)?;
        let x = leaky_relu(&self.conv2.forward(&x)?)?;
        Ok((self.phi.forward(&x)?, self.state.forward(&x)?))
    }
}

/// Everything produced by the pyramid, levels ordered coarsest first.
#[derive(Debug, Clone)]
pub struct PyramidState {
    pub features_a: Vec<Tensor>,
    pub features_b: Vec<Tensor>,
    pub states_a: Vec<Tensor>,
    pub states_b: Vec<Tensor>,
    pub phi_a: Vec<Tensor>,
    pub phi_b: Vec<Tensor>,
}

impl PyramidState {
    pub fn levels(&self) -> usize {
        self.phi_a.len()
    }

    /// `φ_AB = accumulate(φ_A) − accumulate(φ_B)` at full resolution.
    pub fn final_field(&self) -> Result<Tensor> {
        Ok((accumulate_pyramid(&self.phi_a)? - accumulate_pyramid(&self.phi_b)?)?)
    }
}

/// The stack of `K` forward and `K` reverse registration layers.
#[derive(Debug, Clone)]
pub struct Bsfa {
    frl: Vec<RegLayer>,
    rrl: Vec<RegLayer>,
    mode: BsfaMode,
}

impl Bsfa {
    pub fn new(ps: &mut ParamStore, p: &Path, cfg: &ModelConfig) -> Result<Self> {
        let mode = cfg.ablation.bsfa;
        let mut frl = Vec::new();
        let mut rrl = Vec::new();
        for i in 1..=cfg.levels {
            if matches!(mode, BsfaMode::Bidirectional | BsfaMode::WithoutReverse) {
                frl.push(RegLayer::new(ps, &p.push(format!("frl{i}")), cfg.token_width, cfg.reg_hidden)?);
            }
            if matches!(mode, BsfaMode::Bidirectional | BsfaMode::WithoutForward) {
                rrl.push(RegLayer::new(ps, &p.push(format!("rrl{i}")), cfg.token_width, cfg.reg_hidden)?);
            }
        }
        Ok(Self { frl, rrl, mode })
    }

    pub fn levels(&self) -> usize {
        self.frl.len().max(self.rrl.len())
    }

    /// Runs `K` levels from the token maps `(b, W′, h, w)`.
    pub fn forward(&self, map_a: &Tensor, map_b: &Tensor, levels: usize) -> Result<PyramidState> {
        if levels < 1 {
            return Err(NetError::Config("at least one registration level is required".into()));
        }
        if map_a.dims() != map_b.dims() {
            return Err(NetError::Shape(format!("token maps {:?} vs {:?}", map_a.dims(), map_b.dims())));
        }
        let (b, _, h, w) = map_a.dims4()?;
        let mut st = PyramidState {
            features_a: Vec::new(),
            features_b: Vec::new(),
            states_a: Vec::new(),
            states_b: Vec::new(),
            phi_a: Vec::new(),
            phi_b: Vec::new(),
        };
        let (mut fa, mut fb) = (map_a.clone(), map_b.clone());
        let (mut da, mut db) = (map_a.clone(), map_b.clone());
        for i in 0..levels {
            let (lh, lw) = (h << i, w << i);
            let zero = || Tensor::zeros((b, 2, lh, lw), map_a.dtype(), map_a.device());
            let cat = Tensor::cat(&[&fa, &fb], 1)?;
            let (phi_a, next_a) = match self.frl.get(i) {
                Some(l) if self.mode != BsfaMode::Disabled => l.forward(&cat, &da)?,
                _ => (zero()?, da.clone()),
            };
            let (phi_b, next_b) = match self.rrl.get(i) {
                Some(l) if self.mode != BsfaMode::Disabled => l.forward(&cat, &db)?,
                _ => (zero()?, db.clone()),
            };
            st.features_a.push(fa.clone());
            st.features_b.push(fb.clone());
            st.states_a.push(next_a.clone());
            st.states_b.push(next_b.clone());
            st.phi_a.push(phi_a.clone());
            st.phi_b.push(phi_b.clone());
            if i + 1 < levels {
                fa = up2(&warp(&fa, &phi_a)?)?;
                fb = up2(&warp(&fb, &phi_b)?)?;
                da = up2(&next_a)?;
                db = up2(&next_b)?;
            }
        }
        Ok(st)
    }
}

/// `(1 − ssim(I′_A, W(I_A, φ))) + ‖I′_A − W(I_A, φ)‖₁`.
pub fn consistency_loss(moving: &Tensor, label: &Tensor, phi_ab: &Tensor, p: &SsimParams) -> Result<Tensor> {
    let warped = warp(moving, phi_ab)?;
    consistency_of_warped(&warped, label, p)
}

/// Consistency loss for an already warped source.
pub fn consistency_of_warped(warped: &Tensor, label: &Tensor, p: &SsimParams) -> Result<Tensor> {
    if warped.dims() != label.dims() {
        return Err(NetError::Shape(format!("consistency {:?} vs {:?}", warped.dims(), label.dims())));
    }
    Ok((ssim_loss(label, warped, p)? + l1(label, warped)?)?)
}
