use candle_core::{DType, Device, Tensor};

use super::layers::{prefixed, Block, Conv1d, Conv2d, Conv3d, ConformerLayer, GroupNorm, LayerNorm, Linear, TransformerLayer};
use super::weights::{Init, ModelWeights};
use super::{EncoderConfig, PredictorConfig};
use crate::datapipe::{AudioClip, Modality, VideoClip};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct BasicBlock2d {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    down: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock2d {
    fn new(init: &mut Init, prefix: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(init, &prefixed(prefix, "down.conv"), cin, cout, 1, stride, 0)?,
                GroupNorm::new(init, &prefixed(prefix, "down.gn"), cout, groups)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock2d {
            conv1: Conv2d::new(init, &prefixed(prefix, "conv1"), cin, cout, 3, stride, 1)?,
            gn1: GroupNorm::new(init, &prefixed(prefix, "gn1"), cout, groups)?,
            conv2: Conv2d::new(init, &prefixed(prefix, "conv2"), cout, cout, 3, 1, 1)?,
            gn2: GroupNorm::new(init, &prefixed(prefix, "gn2"), cout, groups)?,
            down,
        })
    }

    fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let h = self.gn1.forward(w, &self.conv1.forward(w, x)?)?.relu()?;
        let h = self.gn2.forward(w, &self.conv2.forward(w, &h)?)?;
        let skip = match &self.down {
            Some((conv, gn)) => gn.forward(w, &conv.forward(w, x)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

#[derive(Debug, Clone)]
struct BasicBlock1d {
    conv1: Conv1d,
    gn1: GroupNorm,
    conv2: Conv1d,
    gn2: GroupNorm,
    down: Option<(Conv1d, GroupNorm)>,
}

impl BasicBlock1d {
    fn new(init: &mut Init, prefix: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Result<Self> {
        let down = if stride != 1 || cin != cout {
            Some((
                Conv1d::new(init, &prefixed(prefix, "down.conv"), cin, cout, 1, stride, 0)?,
                GroupNorm::new(init, &prefixed(prefix, "down.gn"), cout, groups)?,
            ))
        } else {
            None
        };
        Ok(BasicBlock1d {
            conv1: Conv1d::new(init, &prefixed(prefix, "conv1"), cin, cout, 3, stride, 1)?,
            gn1: GroupNorm::new(init, &prefixed(prefix, "gn1"), cout, groups)?,
            conv2: Conv1d::new(init, &prefixed(prefix, "conv2"), cout, cout, 3, 1, 1)?,
            gn2: GroupNorm::new(init, &prefixed(prefix, "gn2"), cout, groups)?,
            down,
        })
    }

    fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        let h = self.gn1.forward(w, &self.conv1.forward(w, x)?)?.relu()?;
        let h = self.gn2.forward(w, &self.conv2.forward(w, &h)?)?;
        let skip = match &self.down {
            Some((conv, gn)) => gn.forward(w, &conv.forward(w, x)?)?,
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }
}

/// ResNet front-ends. Both emit one feature vector per video frame.
#[derive(Debug, Clone)]
enum Frontend {
    /// 3D stem, then a 2D ResNet applied to every frame, then spatial pooling.
    Video {
        stem: Conv3d,
        stem_gn: GroupNorm,
        blocks: Vec<BasicBlock2d>,
    },
    /// Strided 1D stem and ResNet over raw samples, then average pooling of
    /// `pool` steps so one output step spans one video frame.
    Audio {
        stem: Conv1d,
        stem_gn: GroupNorm,
        blocks: Vec<BasicBlock1d>,
        pool: usize,
    },
}

const AUDIO_STEM_STRIDE: usize = 4;

impl Frontend {
    fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<(Self, usize)> {
        let c = cfg.conv_channels;
        let g = cfg.norm_groups;
        let mut widths = Vec::new();
        for s in 0..cfg.resnet_stages {
            for b in 0..cfg.blocks_per_stage {
                let cin = if b == 0 && s > 0 { c << (s - 1) } else { c << s };
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                widths.push((format!("frontend.stage{s}.block{b}"), cin, c << s, stride));
            }
        }
        let out = c << (cfg.resnet_stages - 1);
        match cfg.modality {
            Modality::Video => {
                let k = cfg.stem_kernel;
                let stem = Conv3d::new(init, "frontend.stem", 1, c, cfg.stem_temporal_kernel, k, 2, k / 2)?;
                let stem_gn = GroupNorm::new(init, "frontend.stem_gn", c, g)?;
                let blocks = widths
                    .iter()
                    .map(|(p, cin, cout, s)| BasicBlock2d::new(init, p, *cin, *cout, *s, g))
                    .collect::<Result<_>>()?;
                Ok((Frontend::Video { stem, stem_gn, blocks }, out))
            }
            Modality::Audio => {
                let k = cfg.stem_kernel;
                let stem = Conv1d::new(init, "frontend.stem", 1, c, k, AUDIO_STEM_STRIDE, (k - AUDIO_STEM_STRIDE) / 2)?;
                let stem_gn = GroupNorm::new(init, "frontend.stem_gn", c, g)?;
                let blocks = widths
                    .iter()
                    .map(|(p, cin, cout, s)| BasicBlock1d::new(init, p, *cin, *cout, *s, g))
                    .collect::<Result<_>>()?;
                let pool = cfg.temporal_downsample / (AUDIO_STEM_STRIDE << (cfg.resnet_stages - 1));
                Ok((Frontend::Audio { stem, stem_gn, blocks, pool }, out))
            }
        }
    }

    /// Video input `(T, H, W)`, audio input `(L,)`. Output `(T, C)`.
    fn forward(&self, w: &ModelWeights, x: &Tensor) -> Result<Tensor> {
        match self {
            Frontend::Video { stem, stem_gn, blocks } => {
                let (t, h, wd) = x.dims3()?;
                let x = x.reshape((t, 1, h, wd))?;
                let mut x = stem_gn.forward(w, &stem.forward(w, &x)?)?.relu()?;
                let (_, _, h, wd) = x.dims4()?;
                if h >= 2 && wd >= 2 {
                    x = max_pool_2x2(&x)?;
                }
                for b in blocks {
                    x = b.forward(w, &x)?;
                }
                Ok(x.flatten_from(2)?.mean(2)?)
            }
            Frontend::Audio { stem, stem_gn, blocks, pool } => {
                let l = x.dim(0)?;
                let x = x.reshape((1, 1, l))?;
                let mut x = stem_gn.forward(w, &stem.forward(w, &x)?)?.relu()?;
                for b in blocks {
                    x = b.forward(w, &x)?;
                }
                let (_, c, steps) = x.dims3()?;
                let t = steps / pool;
                Ok(x.reshape((c, t, *pool))?.mean(2)?.t()?)
            }
        }
    }
}

/// Front-end plus Transformer (or conformer) encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    frontend: Frontend,
    proj: Linear,
    pos: String,
    layers: Vec<Block>,
    final_norm: LayerNorm,
}

impl Encoder {
    pub fn new(init: &mut Init, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (frontend, feat) = Frontend::new(init, cfg)?;
        let d = cfg.attention_dim;
        let proj = Linear::new(init, "proj", feat, d, true)?;
        let pos = init.normal("pos", &[cfg.max_len, d], 0.02)?;
        let mut layers = Vec::with_capacity(cfg.transformer_layers);
        for i in 0..cfg.transformer_layers {
            let p = format!("layers.{i}");
            layers.push(if cfg.conformer {
                Block::Conformer(ConformerLayer::new(init, &p, d, cfg.heads, cfg.ffn_dim, cfg.conformer_kernel)?)
            } else {
                Block::Transformer(TransformerLayer::new(init, &p, d, cfg.heads, cfg.ffn_dim)?)
            });
        }
        let final_norm = LayerNorm::new(init, "final_norm", d)?;
        Ok(Encoder { cfg: cfg.clone(), frontend, proj, pos, layers, final_norm })
    }

    /// Builds an encoder and its freshly initialized weights.
    pub fn build(cfg: &EncoderConfig, seed: u64, dtype: DType) -> Result<(Self, ModelWeights)> {
        let mut init = Init::new(seed, dtype);
        let enc = Encoder::new(&mut init, cfg)?;
        Ok((enc, init.finish()))
    }

    /// Number of input units per output step.
    pub fn check_input_len(&self, len: usize) -> Result<usize> {
        let ds = self.cfg.temporal_downsample;
        if len == 0 || len % ds != 0 {
            return Err(Error::Shape(format!("input length {len} is not a positive multiple of {ds}")));
        }
        let t = len / ds;
        if t > self.cfg.max_len {
            return Err(Error::Shape(format!("{t} steps exceed the positional table of {}", self.cfg.max_len)));
        }
        Ok(t)
    }

    /// Video `(T, H, W)` or audio `(640 T,)` in, `(1, T, attention_dim)` out.
    pub fn forward(&self, w: &ModelWeights, input: &Tensor) -> Result<Tensor> {
        let expected_rank = match self.cfg.modality {
            Modality::Video => 3,
            Modality::Audio => 1,
        };
        if input.rank() != expected_rank {
            return Err(Error::Shape(format!("encoder input has rank {}, expected {expected_rank}", input.rank())));
        }
        let t = self.check_input_len(input.dim(0)?)?;
        let input = input.to_dtype(w.dtype())?;
        let feats = self.frontend.forward(w, &input)?;
        let x = self.proj.forward(w, &feats)?;
        let x = x.broadcast_add(&w.get(&self.pos)?.narrow(0, 0, t)?)?.unsqueeze(0)?;
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(w, &x)?;
        }
        self.final_norm.forward(w, &x)
    }

    pub fn forward_video(&self, w: &ModelWeights, clip: &VideoClip) -> Result<Tensor> {
        self.forward(w, &video_tensor(clip)?)
    }

    pub fn forward_audio(&self, w: &ModelWeights, clip: &AudioClip) -> Result<Tensor> {
        self.forward(w, &audio_tensor(clip)?)
    }

    /// Distance of a parameter from the top of the encoder: the final norm
    /// and the last block sit at 0, the front-end, input projection and
    /// positional table sit below the deepest block.
    pub fn depth_from_top(&self, name: &str) -> usize {
        let l = self.layers.len();
        if let Some(rest) = name.strip_prefix("layers.") {
            if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
                return l.saturating_sub(1 + i);
            }
        }
        if name.starts_with("final_norm") {
            0
        } else {
            l
        }
    }
}

pub fn video_tensor(clip: &VideoClip) -> Result<Tensor> {
    Ok(Tensor::from_vec(clip.frames.clone(), (clip.len, clip.height, clip.width), &Device::Cpu)?)
}

pub fn audio_tensor(clip: &AudioClip) -> Result<Tensor> {
    Ok(Tensor::from_vec(clip.samples.clone(), clip.samples.len(), &Device::Cpu)?)
}

/// Transformer predictor mapping student embeddings, with mask tokens placed
/// at masked positions, to the target modality's embedding space.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub cfg: PredictorConfig,
    in_proj: Option<Linear>,
    mask_token: Option<String>,
    pos: String,
    layers: Vec<TransformerLayer>,
    final_norm: LayerNorm,
    out: Linear,
}

impl Predictor {
    pub fn new(init: &mut Init, cfg: &PredictorConfig, in_dim: usize, target_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.attention_dim;
        let in_proj = if in_dim != d {
            Some(Linear::new(init, "in_proj", in_dim, d, true)?)
        } else {
            None
        };
        let mask_token = if cfg.uses_mask_tokens {
            Some(init.normal("mask_token", &[d], 0.02)?)
        } else {
            None
        };
        let pos = init.normal("pos", &[cfg.max_len, d], 0.02)?;
        let layers = (0..cfg.blocks)
            .map(|i| TransformerLayer::new(init, &format!("layers.{i}"), d, cfg.heads, cfg.ffn_dim))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(init, "final_norm", d)?;
        let out = Linear::new(init, "out", d, target_dim, true)?;
        Ok(Predictor { cfg: cfg.clone(), in_proj, mask_token, pos, layers, final_norm, out })
    }

    pub fn build(cfg: &PredictorConfig, in_dim: usize, target_dim: usize, seed: u64, dtype: DType) -> Result<(Self, ModelWeights)> {
        let mut init = Init::new(seed, dtype);
        let p = Predictor::new(&mut init, cfg, in_dim, target_dim)?;
        Ok((p, init.finish()))
    }

    /// `x` is `(1, T, in_dim)`; `masked[t]` marks positions replaced by the
    /// mask token. Returns `(1, T, target_dim)`.
    pub fn forward(&self, w: &ModelWeights, x: &Tensor, masked: &[bool]) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        if masked.len() != t {
            return Err(Error::Shape(format!("mask covers {} positions, input has {t}", masked.len())));
        }
        if t > self.cfg.max_len {
            return Err(Error::Shape(format!("{t} steps exceed the positional table of {}", self.cfg.max_len)));
        }
        let mut x = match &self.in_proj {
            Some(p) => p.forward(w, x)?,
            None => x.clone(),
        };
        if let Some(token) = &self.mask_token {
            if masked.iter().any(|&m| m) {
                let m: Vec<f64> = masked.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
                let m = Tensor::from_vec(m, (1, t, 1), &Device::Cpu)?.to_dtype(x.dtype())?;
                let keep = (1.0 - &m)?;
                let token = w.get(token)?.reshape((1, 1, ()))?;
                x = x.broadcast_mul(&keep)?.broadcast_add(&m.broadcast_mul(&token)?)?;
            }
        }
        let mut x = x.broadcast_add(&w.get(&self.pos)?.narrow(0, 0, t)?.unsqueeze(0)?)?;
        for layer in &self.layers {
            x = layer.forward(w, &x)?;
        }
        self.out.forward(w, &self.final_norm.forward(w, &x)?)
    }
}

/// 2x2 max pooling with stride 2 over `(N, C, H, W)`, dropping an odd last
/// row or column. Built from reshapes and a max reduction because the
/// backward pass of candle's `max_pool2d` scales the gradient by 1/4.
fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let x = x.narrow(2, 0, 2 * ho)?.narrow(3, 0, 2 * wo)?;
    Ok(x
        .reshape((n, c, ho, 2, wo, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((n, c, ho, wo, 4))?
        .max(4)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn pool_matches_candle_forward_and_routes_full_gradient() {
        let v: Vec<f32> = (0..2 * 3 * 5 * 7).map(|i| ((i * 37) % 23) as f32 - 11.0).collect();
        let x = Var::from_vec(v, (2, 3, 5, 7), &Device::Cpu).unwrap();
        let ours = max_pool_2x2(x.as_tensor()).unwrap();
        let theirs = x.as_tensor().max_pool2d(2).unwrap();
        let a: Vec<f32> = ours.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = theirs.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let g = ours.sum_all().unwrap().backward().unwrap();
        let total: f32 = g.get(x.as_tensor()).unwrap().sum_all().unwrap().to_scalar().unwrap();
        assert_eq!(total, (2 * 3 * 2 * 3) as f32);
    }
}
