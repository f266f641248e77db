//! Basic layers: linear, convolution, layer norm, Restormer and Transformer
//! blocks.

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::kernels::{channel_affine, conv2d, depthwise3};
use crate::ops::softmax;
use crate::params::{Init, ParamStore, Path};

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, p: &Path, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            w: ps.get(&p.name("weight"), &[d_out, d_in], Init::FanIn(d_in))?,
            b: ps.get(&p.name("bias"), &[d_out], Init::Zeros)?,
        })
    }

    /// `x` is `(..., d_in)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w.t()?)?.broadcast_add(&self.b)?)
    }

    pub fn weight(&self) -> &Tensor {
        &self.w
    }

    /// The same layer with gradients blocked into its weights.
    pub fn frozen(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, p: &Path, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(ps, p, c_in, c_out, k, stride, Init::FanIn(c_in * k * k))
    }

    /// A convolution whose weights and bias start at zero.
    pub fn zeroed(ps: &mut ParamStore, p: &Path, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::with_init(ps, p, c_in, c_out, k, 1, Init::Zeros)
    }

    fn with_init(ps: &mut ParamStore, p: &Path, c_in: usize, c_out: usize, k: usize, stride: usize, init: Init) -> Result<Self> {
        let padding = if stride == 1 { k / 2 } else { 0 };
        Ok(Self {
            w: ps.get(&p.name("weight"), &[c_out, c_in, k, k], init)?,
            b: ps.get(&p.name("bias"), &[c_out], Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.w, &self.b, self.stride, self.padding)
    }
}

/// Per-channel 3x3 convolution with zero padding.
#[derive(Debug, Clone)]
pub struct DepthwiseConv3 {
    w: Tensor,
    b: Tensor,
}

impl DepthwiseConv3 {
    pub fn new(ps: &mut ParamStore, p: &Path, c: usize) -> Result<Self> {
        Ok(Self {
            w: ps.get(&p.name("weight"), &[9, c], Init::FanIn(9))?,
            b: ps.get(&p.name("bias"), &[c], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depthwise3(x, &self.w, &self.b)
    }
}

/// Normalizes over `dim` with a learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    g: Tensor,
    b: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, p: &Path, n: usize) -> Result<Self> {
        Ok(Self {
            g: ps.get(&p.name("gamma"), &[n], Init::Ones)?,
            b: ps.get(&p.name("beta"), &[n], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    fn normalize(&self, x: &Tensor, dim: usize) -> Result<Tensor> {
        let mu = x.mean_keepdim(dim)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(dim)?;
        Ok(xc.broadcast_div(&(var + self.eps)?.sqrt()?)?)
    }

    /// Over the last axis of `(..., n)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.normalize(x, x.rank() - 1)?;
        Ok(y.broadcast_mul(&self.g)?.broadcast_add(&self.b)?)
    }

    /// Over the channel axis of `(b, c, h, w)`.
    pub fn forward_channels(&self, x: &Tensor) -> Result<Tensor> {
        channel_affine(&self.normalize(x, 1)?, &self.g, &self.b)
    }

    pub fn frozen(&self) -> Self {
        Self {
            g: self.g.detach(),
            b: self.b.detach(),
            eps: self.eps,
        }
    }
}

/// Multi-head transposed (channel) attention.
#[derive(Debug, Clone)]
struct Mdta {
    qkv: Conv2d,
    dw: DepthwiseConv3,
    temperature: Tensor,
    proj: Conv2d,
    heads: usize,
}

impl Mdta {
    fn new(ps: &mut ParamStore, p: &Path, c: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Conv2d::new(ps, &p.push("qkv"), c, 3 * c, 1, 1)?,
            dw: DepthwiseConv3::new(ps, &p.push("qkv_dw"), 3 * c)?,
            temperature: ps.get(&p.name("temperature"), &[1, heads, 1, 1], Init::Ones)?,
            proj: Conv2d::new(ps, &p.push("proj"), c, c, 1, 1)?,
            heads,
        })
    }

    fn l2_normalize(x: &Tensor) -> Result<Tensor> {
        let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
        Ok(x.broadcast_div(&n)?)
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.dw.forward(&self.qkv.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv.narrow(1, i * c, c)?.reshape((b, self.heads, c / self.heads, h * w))?)
        };
        let q = Self::l2_normalize(&split(0)?)?;
        let k = Self::l2_normalize(&split(1)?)?;
        let v = split(2)?;
        let attn = q.matmul(&k.t()?)?.broadcast_mul(&self.temperature)?;
        let out = softmax(&attn)?.matmul(&v)?.reshape((b, c, h, w))?;
        self.proj.forward(&out)
    }
}

/// Gated depthwise-convolution feed-forward network.
#[derive(Debug, Clone)]
struct Gdfn {
    project_in: Conv2d,
    dw: DepthwiseConv3,
    project_out: Conv2d,
    hidden: usize,
}

impl Gdfn {
    fn new(ps: &mut ParamStore, p: &Path, c: usize, expansion: f64) -> Result<Self> {
        let hidden = ((c as f64) * expansion).round().max(1.0) as usize;
        Ok(Self {
            project_in: Conv2d::new(ps, &p.push("project_in"), c, 2 * hidden, 1, 1)?,
            dw: DepthwiseConv3::new(ps, &p.push("dw"), 2 * hidden)?,
            project_out: Conv2d::new(ps, &p.push("project_out"), hidden, c, 1, 1)?,
            hidden,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.dw.forward(&self.project_in.forward(x)?)?;
        let gate = y.narrow(1, 0, self.hidden)?.gelu_erf()?;
        let val = y.narrow(1, self.hidden, self.hidden)?;
        self.project_out.forward(&(gate * val)?)
    }
}

/// Restormer block: `x + MDTA(LN(x))` followed by `x + GDFN(LN(x))`.
#[derive(Debug, Clone)]
pub struct RestormerBlock {
    norm1: LayerNorm,
    attn: Mdta,
    norm2: LayerNorm,
    ffn: Gdfn,
}

impl RestormerBlock {
    pub fn new(ps: &mut ParamStore, p: &Path, c: usize, heads: usize) -> Result<Self> {
        let heads = if c % heads == 0 { heads } else { 1 };
        Ok(Self {
            norm1: LayerNorm::new(ps, &p.push("norm1"), c)?,
            attn: Mdta::new(ps, &p.push("attn"), c, heads)?,
            norm2: LayerNorm::new(ps, &p.push("norm2"), c)?,
            ffn: Gdfn::new(ps, &p.push("ffn"), c, 2.66)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward_channels(x)?)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward_channels(&x)?)?)?)
    }
}

/// Pre-norm Transformer encoder layer over `(b, n, d)` tokens.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl TransformerLayer {
    pub fn new(ps: &mut ParamStore, p: &Path, d: usize, heads: usize) -> Result<Self> {
        let heads = if d % heads == 0 { heads } else { 1 };
        Ok(Self {
            norm1: LayerNorm::new(ps, &p.push("norm1"), d)?,
            qkv: Linear::new(ps, &p.push("qkv"), d, 3 * d)?,
            proj: Linear::new(ps, &p.push("proj"), d, d)?,
            norm2: LayerNorm::new(ps, &p.push("norm2"), d)?,
            fc1: Linear::new(ps, &p.push("fc1"), d, 2 * d)?,
            fc2: Linear::new(ps, &p.push("fc2"), 2 * d, d)?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(x)?.reshape((b, n, 3, self.heads, hd))?.permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let out = softmax(&scores)?.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attention(&self.norm1.forward(x)?)?)?;
        let h = self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }

    /// The same layer with gradients blocked into every weight.
    pub fn frozen(&self) -> Self {
        Self {
            norm1: self.norm1.frozen(),
            qkv: self.qkv.frozen(),
            proj: self.proj.frozen(),
            norm2: self.norm2.frozen(),
            fc1: self.fc1.frozen(),
            fc2: self.fc2.frozen(),
            heads: self.heads,
        }
    }
}
