//! The assembled network and its seven loss terms.

use bsfa_core::imaging::SsimParams;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::bsfa::{consistency_of_warped, Bsfa, PyramidState};
use crate::config::ModelConfig;
use crate::error::{NetError, Result};
use crate::mdffr::{inject_heads, modality_ce_loss, probe_loss, tokens_to_map, Encoder, EncoderOutput, ModalityMlp, Probe, Transfer};
use crate::mmff::{fusion_losses, Mmff};
use crate::ops::{scalar, smoothness_loss, warp};
use crate::params::{ParamStore, Path};

/// Intermediate and final results of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub enc_a: EncoderOutput,
    pub enc_b: EncoderOutput,
    /// Head-classifier logits `(b, 2)`.
    pub logits_a: Tensor,
    pub logits_b: Tensor,
    /// Transferred tokens `F̄_A`, `F̄_B`.
    pub transferred_a: Tensor,
    pub transferred_b: Tensor,
    /// Frozen-probe logits, when the probe loss is enabled.
    pub probe_logits: Option<(Tensor, Tensor)>,
    pub pyramid: PyramidState,
    /// Full-resolution `φ_AB`, `(b, 2, H, W)`.
    pub phi_ab: Tensor,
    /// `Ĩ_A = W(I_A, φ_AB)`.
    pub warped_a: Tensor,
    pub fused: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub mlp: ModalityMlp,
    pub transfer_a: Transfer,
    pub transfer_b: Transfer,
    pub bsfa: Bsfa,
    pub mmff: Mmff,
    pub ssim: SsimParams,
}

impl Model {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let root = Path::root();
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(ps, &root.push("encoder"), cfg)?,
            mlp: ModalityMlp::new(ps, &root.push("mlp"), cfg.token_width, cfg.mlp_hidden)?,
            transfer_a: Transfer::new(ps, &root.push("transfer_a"), cfg)?,
            transfer_b: Transfer::new(ps, &root.push("transfer_b"), cfg)?,
            bsfa: Bsfa::new(ps, &root.push("bsfa"), cfg)?,
            mmff: Mmff::new(ps, &root.push("mmff"), cfg)?,
            ssim: SsimParams::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// `moving` is `I_A`, `reference` is `I_B`, both `(b, 1, H, W)`.
    pub fn forward(&self, moving: &Tensor, reference: &Tensor) -> Result<Forward> {
        if moving.dims() != reference.dims() {
            return Err(NetError::Shape(format!("pair {:?} vs {:?}", moving.dims(), reference.dims())));
        }
        let (_, _, h, w) = moving.dims4()?;
        self.cfg.check_input(h, w)?;
        let ab = &self.cfg.ablation;
        let enc_a = self.encoder.forward(moving)?;
        let enc_b = self.encoder.forward(reference)?;
        let (ha, hb) = if ab.classifier_into_encoder {
            (enc_a.head.clone(), enc_b.head.clone())
        } else {
            (enc_a.head.detach(), enc_b.head.detach())
        };
        let logits_a = self.mlp.logits(&ha)?;
        let logits_b = self.mlp.logits(&hb)?;
        let (inj_a, inj_b) = if ab.head_swap {
            inject_heads(&enc_a.tokens, &enc_a.head, &enc_b.tokens, &enc_b.head)?
        } else {
            inject_heads(&enc_a.tokens, &enc_b.head, &enc_b.tokens, &enc_a.head)?
        };
        let transferred_a = self.transfer_a.forward(&inj_a)?;
        let transferred_b = self.transfer_b.forward(&inj_b)?;
        let probe_logits = if ab.probe_loss {
            let probe = Probe::from_live(&self.encoder, &self.mlp);
            let (ta, tb) = if ab.probe_into_encoder {
                (transferred_a.clone(), transferred_b.clone())
            } else {
                (self.transfer_a.forward(&inj_a.detach())?, self.transfer_b.forward(&inj_b.detach())?)
            };
            Some((probe.logits(&ta)?, probe.logits(&tb)?))
        } else {
            None
        };
        let map_a = tokens_to_map(&transferred_a, enc_a.grid)?;
        let map_b = tokens_to_map(&transferred_b, enc_b.grid)?;
        let pyramid = self.bsfa.forward(&map_a, &map_b, self.cfg.levels)?;
        let phi_ab = pyramid.final_field()?;
        let warped_a = warp(moving, &phi_ab)?;
        let raw_a = tokens_to_map(&enc_a.tokens, enc_a.grid)?;
        let raw_b = tokens_to_map(&enc_b.tokens, enc_b.grid)?;
        let g = self.mmff.fuse_features(&raw_a, &raw_b, &phi_ab)?;
        let fused = self.mmff.reconstruct(&g, &enc_a.shallow, &enc_b.shallow, &phi_ab)?;
        Ok(Forward {
            enc_a,
            enc_b,
            logits_a,
            logits_b,
            transferred_a,
            transferred_b,
            probe_logits,
            pyramid,
            phi_ab,
            warped_a,
            fused,
        })
    }

    /// All loss terms for a forward pass. `label` is `I′_A`.
    pub fn losses(&self, fwd: &Forward, label: &Tensor, reference: &Tensor, mu: f64) -> Result<LossParts> {
        let ce1 = modality_ce_loss(&fwd.logits_a, &fwd.logits_b)?;
        let ce2 = match &fwd.probe_logits {
            Some((a, b)) => probe_loss(a, b)?,
            None => ce1.zeros_like()?,
        };
        let consis = consistency_of_warped(&fwd.warped_a, label, &self.ssim)?;
        let smooth = smoothness_loss(&fwd.pyramid.phi_a, &fwd.pyramid.phi_b)?;
        let fl = fusion_losses(&fwd.fused, &fwd.warped_a, reference, mu, &self.ssim)?;
        Ok(LossParts {
            ce1,
            ce2,
            consis,
            smooth,
            structure: fl.structure,
            gradient: fl.gradient,
            intensity: fl.intensity,
            ssim_loss_a: fl.ssim_loss_a,
            ssim_loss_b: fl.ssim_loss_b,
        })
    }
}

/// The seven loss terms as graph tensors.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub ce1: Tensor,
    pub ce2: Tensor,
    pub consis: Tensor,
    pub smooth: Tensor,
    pub structure: Tensor,
    pub gradient: Tensor,
    pub intensity: Tensor,
    pub ssim_loss_a: Tensor,
    pub ssim_loss_b: Tensor,
}

impl LossParts {
    /// A term by its name in [`LossValues::NAMES`].
    pub fn term(&self, name: &str) -> Option<&Tensor> {
        Some(match name {
            "ce1" => &self.ce1,
            "ce2" => &self.ce2,
            "consis" => &self.consis,
            "smooth" => &self.smooth,
            "struct" => &self.structure,
            "grad" => &self.gradient,
            "inten" => &self.intensity,
            _ => return None,
        })
    }

    /// `L_ce1 + L_ce2 + L_consis + L_smooth + L_struct + L_grad + λ L_inten`.
    pub fn total(&self, lambda: f64) -> Result<Tensor> {
        let sum = (&self.ce1 + &self.ce2)?;
        let sum = (sum + &self.consis)?;
        let sum = (sum + &self.smooth)?;
        let sum = (sum + &self.structure)?;
        let sum = (sum + &self.gradient)?;
        Ok((sum + self.intensity.affine(lambda, 0.0)?)?)
    }

    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            ce1: scalar(&self.ce1)?,
            ce2: scalar(&self.ce2)?,
            consis: scalar(&self.consis)?,
            smooth: scalar(&self.smooth)?,
            structure: scalar(&self.structure)?,
            gradient: scalar(&self.gradient)?,
            intensity: scalar(&self.intensity)?,
        })
    }
}

/// Loss terms read back as numbers.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValues {
    pub ce1: f64,
    pub ce2: f64,
    pub consis: f64,
    pub smooth: f64,
    pub structure: f64,
    pub gradient: f64,
    pub intensity: f64,
}

impl LossValues {
    pub const NAMES: [&'static str; 7] = ["ce1", "ce2", "consis", "smooth", "struct", "grad", "inten"];

    pub fn as_array(&self) -> [f64; 7] {
        [self.ce1, self.ce2, self.consis, self.smooth, self.structure, self.gradient, self.intensity]
    }

    pub fn from_array(v: [f64; 7]) -> Self {
        Self {
            ce1: v[0],
            ce2: v[1],
            consis: v[2],
            smooth: v[3],
            structure: v[4],
            gradient: v[5],
            intensity: v[6],
        }
    }

    /// Fails on the first non-finite term, naming it.
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.as_array()) {
            if !v.is_finite() {
                return Err(NetError::NonFinite { term: name, value: v });
            }
        }
        Ok(())
    }

    /// Weighted total, rejecting non-finite terms.
    pub fn total(&self, lambda: f64) -> Result<f64> {
        self.check_finite()?;
        let v = self.as_array();
        Ok(v[..6].iter().sum::<f64>() + lambda * v[6])
    }
}
