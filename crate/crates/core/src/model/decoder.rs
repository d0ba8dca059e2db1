use candle_core::{DType, Device, Tensor, D};

use super::layers::{DecoderLayer, LayerNorm, Linear};
use super::weights::{Init, ModelWeights};
use super::DecoderConfig;
use crate::error::{Error, Result};

/// Autoregressive Transformer decoder over encoder memory.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    embed: String,
    pos: String,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
    out: Linear,
}

impl Decoder {
    pub fn new(init: &mut Init, prefix: &str, cfg: &DecoderConfig, mem_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.attention_dim;
        let p = |n: &str| if prefix.is_empty() { n.to_string() } else { format!("{prefix}.{n}") };
        let embed = init.normal(&p("embed"), &[cfg.vocab_size, d], 1.0 / (d as f64).sqrt())?;
        let pos = init.normal(&p("pos"), &[cfg.max_len, d], 0.02)?;
        let layers = (0..cfg.layers)
            .map(|i| DecoderLayer::new(init, &p(&format!("layers.{i}")), d, mem_dim, cfg.heads, cfg.ffn_dim))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(init, &p("final_norm"), d)?;
        let out = Linear::new(init, &p("out"), d, cfg.vocab_size, true)?;
        Ok(Decoder { cfg: cfg.clone(), embed, pos, layers, final_norm, out })
    }

    /// Next-token log-probabilities for a batch of equal-length input
    /// prefixes (each starting with the start token). `memory` is
    /// `(1, T, mem_dim)`. Returns `(B, L, vocab_size)`.
    pub fn forward(&self, w: &ModelWeights, inputs: &[Vec<u32>], memory: &Tensor) -> Result<Tensor> {
        let b = inputs.len();
        let l = inputs.first().map(Vec::len).unwrap_or(0);
        if b == 0 || l == 0 {
            return Err(Error::Shape("decoder needs at least one nonempty input".into()));
        }
        if inputs.iter().any(|s| s.len() != l) {
            return Err(Error::Shape("decoder inputs differ in length".into()));
        }
        if l > self.cfg.max_len {
            return Err(Error::Shape(format!("prefix of {l} tokens exceeds decoder limit {}", self.cfg.max_len)));
        }
        if let Some(&bad) = inputs.iter().flatten().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        let ids: Vec<u32> = inputs.iter().flatten().copied().collect();
        let ids = Tensor::from_vec(ids, b * l, &Device::Cpu)?;
        let emb = w.get(&self.embed)?.index_select(&ids, 0)?.reshape((b, l, self.cfg.attention_dim))?;
        let mut x = emb.broadcast_add(&w.get(&self.pos)?.narrow(0, 0, l)?.unsqueeze(0)?)?;
        let memory = memory.to_dtype(x.dtype())?;
        for layer in &self.layers {
            x = layer.forward(w, &x, &memory)?;
        }
        let logits = self.out.forward(w, &self.final_norm.forward(w, &x)?)?;
        Ok(candle_nn::ops::log_softmax(&logits, D::Minus1)?)
    }
}

/// Linear projection from encoder outputs to vocabulary plus blank.
#[derive(Debug, Clone)]
pub struct CtcHead {
    proj: Linear,
}

impl CtcHead {
    pub fn new(init: &mut Init, prefix: &str, enc_dim: usize, vocab_size: usize) -> Result<Self> {
        Ok(CtcHead { proj: Linear::new(init, prefix, enc_dim, vocab_size + 1, true)? })
    }

    pub fn blank(&self) -> usize {
        self.proj.out_dim - 1
    }

    /// `(1, T, enc_dim)` in, `(T, vocab_size + 1)` log-probabilities out.
    pub fn forward(&self, w: &ModelWeights, enc: &Tensor) -> Result<Tensor> {
        let logits = self.proj.forward(w, enc)?.squeeze(0)?;
        Ok(candle_nn::ops::log_softmax(&logits, D::Minus1)?)
    }
}

/// Row-major copy of a 2D tensor as `f64` rows.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}
