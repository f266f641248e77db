//! Shared encoder, modality feature representation heads (MFRH), head
//! injection, transfer blocks and the frozen modality probe.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::error::{NetError, Result};
use crate::layers::{Conv2d, Linear, RestormerBlock, TransformerLayer};
use crate::ops::{log_softmax, resize, softmax};
use crate::params::{Init, ParamStore, Path};

/// Encoder output for a batch of images.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Full-resolution features `F^s`, `(b, C, H, W)`.
    pub shallow: Tensor,
    /// Patch tokens `(b, P, W′)`.
    pub tokens: Tensor,
    /// Head token `(b, W′)`.
    pub head: Tensor,
    /// Token grid `(P_h, P_w)`.
    pub grid: (usize, usize),
}

/// Converts `(b, P, W′)` tokens to a `(b, W′, P_h, P_w)` map.
pub fn tokens_to_map(tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, p, d) = tokens.dims3()?;
    if p != grid.0 * grid.1 {
        return Err(NetError::Shape(format!("{p} tokens do not fill a {}x{} grid", grid.0, grid.1)));
    }
    Ok(tokens.transpose(1, 2)?.reshape((b, d, grid.0, grid.1))?)
}

pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = map.dims4()?;
    Ok(map.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?)
}

fn split_stride(levels: usize) -> (usize, usize) {
    let total = levels - 1;
    (1 << total.div_ceil(2), 1 << (total / 2))
}

/// Restormer and Transformer feature encoder shared by both modalities.
#[derive(Debug, Clone)]
pub struct Encoder {
    embed: Conv2d,
    shallow: RestormerBlock,
    down1: Conv2d,
    mid: RestormerBlock,
    down2: Conv2d,
    head: Tensor,
    pos: Option<Tensor>,
    layers: Vec<TransformerLayer>,
    width: usize,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, p: &Path, cfg: &ModelConfig) -> Result<Self> {
        let (s1, s2) = split_stride(cfg.levels);
        let (c, m, d) = (cfg.base_channels, cfg.mid_channels, cfg.token_width);
        let pos = if cfg.positional_embedding {
            Some(ps.get(&p.name("pos_embed"), &[1, d, cfg.pos_grid, cfg.pos_grid], Init::Uniform(0.02))?)
        } else {
            None
        };
        Ok(Self {
            embed: Conv2d::new(ps, &p.push("embed"), 1, c, 3, 1)?,
            shallow: RestormerBlock::new(ps, &p.push("restormer1"), c, cfg.restormer_heads)?,
            down1: Conv2d::new(ps, &p.push("down1"), c, m, s1, s1)?,
            mid: RestormerBlock::new(ps, &p.push("restormer2"), m, cfg.restormer_heads)?,
            down2: Conv2d::new(ps, &p.push("down2"), m, d, s2, s2)?,
            head: ps.get(&p.name("mfrh"), &[1, 1, d], Init::Uniform(0.02))?,
            pos,
            layers: (0..cfg.encoder_layers)
                .map(|i| TransformerLayer::new(ps, &p.push(format!("transformer{i}")), d, cfg.transformer_heads))
                .collect::<Result<_>>()?,
            width: d,
        })
    }

    /// Encodes a `(b, 1, H, W)` batch.
    pub fn forward(&self, img: &Tensor) -> Result<EncoderOutput> {
        let (b, c, _, _) = img.dims4()?;
        if c != 1 {
            return Err(NetError::Shape(format!("encoder expects one channel, got {c}")));
        }
        let shallow = self.shallow.forward(&self.embed.forward(img)?)?;
        let x = self.mid.forward(&self.down1.forward(&shallow)?)?;
        let x = self.down2.forward(&x)?;
        let (_, _, gh, gw) = x.dims4()?;
        let x = match &self.pos {
            Some(pos) => x.broadcast_add(&resize(pos, gh, gw)?)?,
            None => x,
        };
        let tokens = map_to_tokens(&x)?;
        let head = self.head.broadcast_as((b, 1, self.width))?;
        let mut seq = Tensor::cat(&[&head, &tokens], 1)?;
        for layer in &self.layers {
            seq = layer.forward(&seq)?;
        }
        Ok(EncoderOutput {
            shallow,
            head: seq.narrow(1, 0, 1)?.squeeze(1)?,
            tokens: seq.narrow(1, 1, gh * gw)?,
            grid: (gh, gw),
        })
    }

    /// The final Transformer layer and head token, with gradients blocked.
    pub fn frozen_tail(&self) -> (TransformerLayer, Tensor) {
        (self.layers.last().expect("encoder has layers").frozen(), self.head.detach())
    }
}

/// Two-layer classifier mapping a head token to modality logits.
#[derive(Debug, Clone)]
pub struct ModalityMlp {
    fc1: Linear,
    fc2: Linear,
}

impl ModalityMlp {
    pub fn new(ps: &mut ParamStore, p: &Path, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &p.push("fc1"), d, hidden)?,
            fc2: Linear::new(ps, &p.push("fc2"), hidden, 2)?,
        })
    }

    pub fn logits(&self, head: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(head)?.gelu_erf()?)
    }

    pub fn probs(&self, head: &Tensor) -> Result<Tensor> {
        softmax(&self.logits(head)?)
    }

    pub fn frozen(&self) -> Self {
        Self {
            fc1: self.fc1.frozen(),
            fc2: self.fc2.frozen(),
        }
    }
}

/// Stack of Transformer layers applied to injected tokens.
#[derive(Debug, Clone)]
pub struct Transfer {
    layers: Vec<TransformerLayer>,
}

impl Transfer {
    pub fn new(ps: &mut ParamStore, p: &Path, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            layers: (0..cfg.transfer_layers)
                .map(|i| TransformerLayer::new(ps, &p.push(format!("layer{i}")), cfg.token_width, cfg.transformer_heads))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let mut x = tokens.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }
}

/// Cross-injection: `F̃_A^k = f̂_A^k + f̂_B`, `F̃_B^k = f̂_B^k + f̂_A`.
pub fn inject_heads(tok_a: &Tensor, head_a: &Tensor, tok_b: &Tensor, head_b: &Tensor) -> Result<(Tensor, Tensor)> {
    if tok_a.dims() != tok_b.dims() || head_a.dims() != head_b.dims() {
        return Err(NetError::Shape(format!(
            "token shapes {:?}/{:?}, heads {:?}/{:?}",
            tok_a.dims(),
            tok_b.dims(),
            head_a.dims(),
            head_b.dims()
        )));
    }
    let (b, _, d) = tok_a.dims3()?;
    if head_a.dims() != [b, d] {
        return Err(NetError::Shape(format!("head {:?} does not match tokens {:?}", head_a.dims(), tok_a.dims())));
    }
    Ok((
        tok_a.broadcast_add(&head_b.unsqueeze(1)?)?,
        tok_b.broadcast_add(&head_a.unsqueeze(1)?)?,
    ))
}

/// Mean over the batch of `−Σ t·log softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, target: [f64; 2]) -> Result<Tensor> {
    let lp = log_softmax(logits)?;
    let t = Tensor::new(&target, logits.device())?.to_dtype(logits.dtype())?;
    Ok(lp.broadcast_mul(&t)?.sum(D::Minus1)?.neg()?.mean_all()?)
}

/// `CE(p, t) = −Σ t·ln max(p, ε)` on plain probabilities.
pub fn cross_entropy_probs(p: [f64; 2], t: [f64; 2]) -> f64 {
    const EPS: f64 = 1e-12;
    -(t[0] * p[0].max(EPS).ln() + t[1] * p[1].max(EPS).ln())
}

/// Modality A is class 1, modality B class 0.
pub const TARGET_A: [f64; 2] = [0.0, 1.0];
pub const TARGET_B: [f64; 2] = [1.0, 0.0];
pub const TARGET_UNIFORM: [f64; 2] = [0.5, 0.5];

/// Head-classification loss `CE(y_A, [0,1]) + CE(y_B, [1,0])` from logits.
pub fn modality_ce_loss(logits_a: &Tensor, logits_b: &Tensor) -> Result<Tensor> {
    Ok((cross_entropy(logits_a, TARGET_A)? + cross_entropy(logits_b, TARGET_B)?)?)
}

/// Weight-tied, gradient-blocked copy of the encoder's last Transformer
/// layer and the modality classifier.
#[derive(Debug, Clone)]
pub struct Probe {
    layer: TransformerLayer,
    head: Tensor,
    mlp: ModalityMlp,
}

impl Probe {
    /// Refreshed from the live weights; call once per step.
    pub fn from_live(encoder: &Encoder, mlp: &ModalityMlp) -> Self {
        let (layer, head) = encoder.frozen_tail();
        Self {
            layer,
            head,
            mlp: mlp.frozen(),
        }
    }

    /// Modality logits for transferred tokens `(b, P, W′)`.
    pub fn logits(&self, tokens: &Tensor) -> Result<Tensor> {
        let (b, _, d) = tokens.dims3()?;
        let head = self.head.broadcast_as((b, 1, d))?;
        let seq = self.layer.forward(&Tensor::cat(&[&head, tokens], 1)?)?;
        self.mlp.logits(&seq.narrow(1, 0, 1)?.squeeze(1)?)
    }
}

/// `CE(y*_A, [½,½]) + CE(y*_B, [½,½])`.
pub fn probe_loss(logits_a: &Tensor, logits_b: &Tensor) -> Result<Tensor> {
    Ok((cross_entropy(logits_a, TARGET_UNIFORM)? + cross_entropy(logits_b, TARGET_UNIFORM)?)?)
}
