//! Building blocks. Each layer stores parameter names only and reads its
//! tensors from a [`ModelWeights`] at call time, so a student and its teacher
//! share one layer description.

use candle_core::{DType, Device, Tensor, D};

use super::weights::{Init, ModelWeights};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: String,
    bias: Option<String>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, prefix: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = init.uniform(&join(prefix, "weight"), &[out_dim, in_dim], bound)?;
        let bias = if bias {
            Some(init.uniform(&join(prefix, "bias"), &[out_dim], bound)?)
        } else {
            None
        };
        Ok(Linear { weight, bias, in_dim, out_dim })
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Shape(format!("linear expects {} inputs, got {last}", self.in_dim)));
        }
        let rows = x.elem_count() / last;
        let y = x.reshape((rows, last))?.matmul(&w.get(&self.weight)?.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(w.get(b)?)?,
            None => y,
        };
        let mut out = dims;
        *out.last_mut().unwrap() = self.out_dim;
        Ok(y.reshape(out)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: String,
    beta: String,
}

impl LayerNorm {
    pub fn new(init: &mut Init, prefix: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant(&join(prefix, "gamma"), &[dim], 1.0)?,
            beta: init.constant(&join(prefix, "beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(xn.broadcast_mul(w.get(&self.gamma)?)?.broadcast_add(w.get(&self.beta)?)?)
    }
}

/// Group normalization over `(N, C, ...)` inputs, used in place of batch
/// normalization so that training and evaluation behave identically.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: String,
    beta: String,
    channels: usize,
    groups: usize,
}

impl GroupNorm {
    pub fn new(init: &mut Init, prefix: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = if groups > 0 && channels % groups == 0 { groups } else { 1 };
        Ok(GroupNorm {
            gamma: init.constant(&join(prefix, "gamma"), &[channels], 1.0)?,
            beta: init.constant(&join(prefix, "beta"), &[channels], 0.0)?,
            channels,
            groups,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.len() < 2 || dims[1] != self.channels {
            return Err(Error::Shape(format!("group norm expects {} channels, got {dims:?}", self.channels)));
        }
        let n = dims[0];
        let grouped = x.reshape((n, self.groups, ()))?;
        let mean = grouped.mean_keepdim(D::Minus1)?;
        let xc = grouped.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?.reshape(dims.as_slice())?;
        let mut affine_shape = vec![1; dims.len()];
        affine_shape[1] = self.channels;
        let gamma = w.get(&self.gamma)?.reshape(affine_shape.as_slice())?;
        let beta = w.get(&self.beta)?.reshape(affine_shape.as_slice())?;
        Ok(xn.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        init: &mut Init,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (2.0 / (cin * kernel) as f64).sqrt();
        Ok(Conv1d {
            weight: init.normal(&join(prefix, "weight"), &[cout, cin, kernel], std)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv1d(w.get(&self.weight)?, self.padding, self.stride, 1, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        init: &mut Init,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        Ok(Conv2d {
            weight: init.normal(&join(prefix, "weight"), &[cout, cin, kernel, kernel], std)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(w.get(&self.weight)?, self.padding, self.stride, 1, 1)?)
    }
}

/// Spatio-temporal convolution over a `(T, C, H, W)` frame stack, computed as
/// a sum of 2D convolutions over temporally shifted copies of the input.
/// Temporal stride is 1 and temporal padding keeps the frame count.
#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: String,
    pub temporal_kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        prefix: &str,
        cin: usize,
        cout: usize,
        temporal_kernel: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if temporal_kernel % 2 == 0 {
            return Err(Error::Config("temporal kernel must be odd".into()));
        }
        let std = (2.0 / (cin * temporal_kernel * kernel * kernel) as f64).sqrt();
        Ok(Conv3d {
            weight: init.normal(
                &join(prefix, "weight"),
                &[cout, cin, temporal_kernel, kernel, kernel],
                std,
            )?,
            temporal_kernel,
            stride,
            padding,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let weight = w.get(&self.weight)?;
        let t = x.dim(0)?;
        let half = self.temporal_kernel / 2;
        let padded = x.pad_with_zeros(0, half, half)?;
        let mut acc: Option<Tensor> = None;
        for j in 0..self.temporal_kernel {
            let xs = padded.narrow(0, j, t)?;
            let wj = weight.narrow(2, j, 1)?.squeeze(2)?.contiguous()?;
            let y = xs.conv2d(&wj, self.padding, self.stride, 1, 1)?;
            acc = Some(match acc {
                Some(a) => (a + y)?,
                None => y,
            });
        }
        Ok(acc.expect("temporal kernel is at least 1"))
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    l1: Linear,
    l2: Linear,
}

impl FeedForward {
    pub fn new(init: &mut Init, prefix: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            l1: Linear::new(init, &join(prefix, "l1"), dim, hidden, true)?,
            l2: Linear::new(init, &join(prefix, "l2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(w, &self.l1.forward(w, x)?.relu()?)
    }
}

fn causal_bias(len: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f64; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = -1e9;
        }
    }
    Ok(Tensor::from_vec(data, (len, len), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, prefix: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("attention dim {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(init, &join(prefix, "q"), dim, dim, true)?,
            k: Linear::new(init, &join(prefix, "k"), kv_dim, dim, true)?,
            v: Linear::new(init, &join(prefix, "v"), kv_dim, dim, true)?,
            o: Linear::new(init, &join(prefix, "o"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, _) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, self.dim / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` is `(B, Lq, dim)`, `memory` is `(B or 1, Lk, kv_dim)`.
    pub fn forward(&self, w: &ModelWeights, query: &Tensor, memory: &Tensor, causal: bool) -> Result<Tensor> {
        let (b, lq, _) = query.dims3()?;
        let lk = memory.dim(1)?;
        let q = self.split(&self.q.forward(w, query)?)?;
        let mut k = self.split(&self.k.forward(w, memory)?)?;
        let mut v = self.split(&self.v.forward(w, memory)?)?;
        if k.dim(0)? != b {
            let shape = (b, self.heads, lk, self.dim / self.heads);
            k = k.broadcast_as(shape)?.contiguous()?;
            v = v.broadcast_as(shape)?.contiguous()?;
        }
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if causal {
            scores = scores.broadcast_add(&causal_bias(lq, scores.dtype())?)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, lq, self.dim))?;
        self.o.forward(w, &ctx)
    }
}

/// Pre-norm Transformer encoder layer.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

impl TransformerLayer {
    pub fn new(init: &mut Init, prefix: &str, dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(TransformerLayer {
            ln1: LayerNorm::new(init, &join(prefix, "ln1"), dim)?,
            attn: MultiHeadAttention::new(init, &join(prefix, "attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(init, &join(prefix, "ln2"), dim)?,
            ffn: FeedForward::new(init, &join(prefix, "ffn"), dim, ffn)?,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(w, x)?;
        let x = (x + self.attn.forward(w, &h, &h, false)?)?;
        let h = self.ln2.forward(w, &x)?;
        Ok((&x + self.ffn.forward(w, &h)?)?)
    }
}

/// Convolution module of a conformer block: pointwise GLU, depthwise
/// temporal convolution, normalization, swish, pointwise projection.
#[derive(Debug, Clone)]
struct ConvModule {
    ln: LayerNorm,
    pw1: Linear,
    dw_weight: String,
    dw_bias: String,
    kernel: usize,
    norm: LayerNorm,
    pw2: Linear,
}

impl ConvModule {
    fn new(init: &mut Init, prefix: &str, dim: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config("conformer kernel must be odd".into()));
        }
        let bound = 1.0 / (kernel as f64).sqrt();
        Ok(ConvModule {
            ln: LayerNorm::new(init, &join(prefix, "ln"), dim)?,
            pw1: Linear::new(init, &join(prefix, "pw1"), dim, 2 * dim, true)?,
            dw_weight: init.uniform(&join(prefix, "dw.weight"), &[kernel, dim], bound)?,
            dw_bias: init.constant(&join(prefix, "dw.bias"), &[dim], 0.0)?,
            kernel,
            norm: LayerNorm::new(init, &join(prefix, "norm"), dim)?,
            pw2: Linear::new(init, &join(prefix, "pw2"), dim, dim, true)?,
        })
    }

    fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let (_, l, dim) = x.dims3()?;
        let h = self.pw1.forward(w, &self.ln.forward(w, x)?)?;
        let gate = candle_nn::ops::sigmoid(&h.narrow(2, dim, dim)?)?;
        let h = (h.narrow(2, 0, dim)? * gate)?;
        let half = self.kernel / 2;
        let padded = h.pad_with_zeros(1, half, half)?;
        let weight = w.get(&self.dw_weight)?;
        let mut acc = w.get(&self.dw_bias)?.reshape((1, 1, dim))?;
        for j in 0..self.kernel {
            let tap = weight.narrow(0, j, 1)?.reshape((1, 1, dim))?;
            acc = padded.narrow(1, j, l)?.broadcast_mul(&tap)?.broadcast_add(&acc)?;
        }
        let h = self.norm.forward(w, &acc)?.silu()?;
        self.pw2.forward(w, &h)
    }
}

/// Conformer block (macaron feed-forwards around attention and convolution).
#[derive(Debug, Clone)]
pub struct ConformerLayer {
    ln_ff1: LayerNorm,
    ff1: FeedForward,
    ln_attn: LayerNorm,
    attn: MultiHeadAttention,
    conv: ConvModule,
    ln_ff2: LayerNorm,
    ff2: FeedForward,
    ln_out: LayerNorm,
}

impl ConformerLayer {
    pub fn new(init: &mut Init, prefix: &str, dim: usize, heads: usize, ffn: usize, kernel: usize) -> Result<Self> {
        Ok(ConformerLayer {
            ln_ff1: LayerNorm::new(init, &join(prefix, "ln_ff1"), dim)?,
            ff1: FeedForward::new(init, &join(prefix, "ff1"), dim, ffn)?,
            ln_attn: LayerNorm::new(init, &join(prefix, "ln_attn"), dim)?,
            attn: MultiHeadAttention::new(init, &join(prefix, "attn"), dim, dim, heads)?,
            conv: ConvModule::new(init, &join(prefix, "conv"), dim, kernel)?,
            ln_ff2: LayerNorm::new(init, &join(prefix, "ln_ff2"), dim)?,
            ff2: FeedForward::new(init, &join(prefix, "ff2"), dim, ffn)?,
            ln_out: LayerNorm::new(init, &join(prefix, "ln_out"), dim)?,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let x = (x + (self.ff1.forward(w, &self.ln_ff1.forward(w, x)?)? * 0.5)?)?;
        let h = self.ln_attn.forward(w, &x)?;
        let x = (&x + self.attn.forward(w, &h, &h, false)?)?;
        let x = (&x + self.conv.forward(w, &x)?)?;
        let x = (&x + (self.ff2.forward(w, &self.ln_ff2.forward(w, &x)?)? * 0.5)?)?;
        self.ln_out.forward(w, &x)
    }
}

/// Encoder block, plain Transformer or conformer.
#[derive(Debug, Clone)]
pub enum Block {
    Transformer(TransformerLayer),
    Conformer(ConformerLayer),
}

impl Block {
    pub fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Transformer(l) => l.forward(w, x),
            Block::Conformer(l) => l.forward(w, x),
        }
    }
}

/// Pre-norm Transformer decoder layer with causal self-attention and
/// cross-attention over encoder memory.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(init: &mut Init, prefix: &str, dim: usize, mem_dim: usize, heads: usize, ffn: usize) -> Result<Self> {
        Ok(DecoderLayer {
            ln1: LayerNorm::new(init, &join(prefix, "ln1"), dim)?,
            self_attn: MultiHeadAttention::new(init, &join(prefix, "self_attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(init, &join(prefix, "ln2"), dim)?,
            cross_attn: MultiHeadAttention::new(init, &join(prefix, "cross_attn"), dim, mem_dim, heads)?,
            ln3: LayerNorm::new(init, &join(prefix, "ln3"), dim)?,
            ffn: FeedForward::new(init, &join(prefix, "ffn"), dim, ffn)?,
        })
    }

    pub fn forward(&self, w: &ModelWeights, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(w, x)?;
        let x = (x + self.self_attn.forward(w, &h, &h, true)?)?;
        let h = self.ln2.forward(w, &x)?;
        let x = (&x + self.cross_attn.forward(w, &h, memory, false)?)?;
        let h = self.ln3.forward(w, &x)?;
        Ok((&x + self.ffn.forward(w, &h)?)?)
    }
}

pub(crate) fn prefixed(prefix: &str, name: &str) -> String {
    join(prefix, name)
}
