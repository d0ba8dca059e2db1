//! Encoders, predictors, the recognition decoder and their weight stores.

mod decoder;
mod encoder;
pub mod layers;
mod weights;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

pub use decoder::{to_rows, CtcHead, Decoder};
pub use encoder::{audio_tensor, video_tensor, Encoder, Predictor};
pub use weights::{Checkpoint, Init, ModelWeights};

use crate::datapipe::Modality;
use crate::error::{Error, Result};
use crate::media::SAMPLES_PER_FRAME;

/// Positional table length: 24 s at 25 frames per second.
pub const PAPER_MAX_LEN: usize = 600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub modality: Modality,
    /// Width of the first ResNet stage; stage `s` has `conv_channels << s`.
    pub conv_channels: usize,
    pub resnet_stages: usize,
    pub blocks_per_stage: usize,
    /// Spatial stem kernel for video, stem kernel in samples for audio.
    pub stem_kernel: usize,
    pub stem_temporal_kernel: usize,
    pub norm_groups: usize,
    pub transformer_layers: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub temporal_downsample: usize,
    pub max_len: usize,
    #[serde(default)]
    pub conformer: bool,
    #[serde(default = "default_conformer_kernel")]
    pub conformer_kernel: usize,
}

fn default_conformer_kernel() -> usize {
    31
}

impl EncoderConfig {
    fn base(modality: Modality) -> Self {
        let (stem_kernel, stem_temporal_kernel, temporal_downsample) = match modality {
            Modality::Video => (7, 5, 1),
            Modality::Audio => (80, 1, SAMPLES_PER_FRAME),
        };
        EncoderConfig {
            modality,
            conv_channels: 64,
            resnet_stages: 4,
            blocks_per_stage: 2,
            stem_kernel,
            stem_temporal_kernel,
            norm_groups: 32,
            transformer_layers: 12,
            attention_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            temporal_downsample,
            max_len: PAPER_MAX_LEN,
            conformer: false,
            conformer_kernel: default_conformer_kernel(),
        }
    }

    /// ResNet-18 front-end and a 12-layer, 512-dim, 8-head Transformer.
    pub fn paper(modality: Modality) -> Self {
        Self::base(modality)
    }

    pub fn desk(modality: Modality) -> Self {
        EncoderConfig {
            conv_channels: 8,
            blocks_per_stage: 1,
            norm_groups: 4,
            transformer_layers: 2,
            attention_dim: 64,
            heads: 4,
            ffn_dim: 256,
            conformer_kernel: 7,
            ..Self::base(modality)
        }
    }

    /// Few-hundred-parameter configuration for gradient checks.
    pub fn tiny(modality: Modality) -> Self {
        let stem_kernel = match modality {
            Modality::Video => 3,
            Modality::Audio => 8,
        };
        EncoderConfig {
            conv_channels: 1,
            resnet_stages: 2,
            blocks_per_stage: 1,
            stem_kernel,
            stem_temporal_kernel: if modality == Modality::Video { 3 } else { 1 },
            norm_groups: 1,
            transformer_layers: 1,
            attention_dim: 4,
            heads: 2,
            ffn_dim: 8,
            max_len: 8,
            conformer_kernel: 3,
            ..Self::base(modality)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.attention_dim % self.heads != 0 {
            return bad(format!("attention_dim {} not divisible by {} heads", self.attention_dim, self.heads));
        }
        if self.temporal_downsample < 1 {
            return bad("temporal_downsample must be at least 1".into());
        }
        if self.conv_channels == 0 || self.resnet_stages == 0 || self.blocks_per_stage == 0 {
            return bad("front-end needs at least one channel, stage and block".into());
        }
        if self.max_len == 0 || self.ffn_dim == 0 {
            return bad("max_len and ffn_dim must be positive".into());
        }
        match self.modality {
            Modality::Video => {
                if self.temporal_downsample != 1 {
                    return bad("video encoder keeps the frame rate (temporal_downsample 1)".into());
                }
                if self.stem_temporal_kernel % 2 == 0 || self.stem_kernel == 0 {
                    return bad("video stem kernels must be odd and positive".into());
                }
            }
            Modality::Audio => {
                if self.temporal_downsample != SAMPLES_PER_FRAME {
                    return bad(format!("audio encoder must downsample by {SAMPLES_PER_FRAME}"));
                }
                let conv_stride = 4usize << (self.resnet_stages - 1);
                if self.temporal_downsample % conv_stride != 0 {
                    return bad(format!("{} stages do not divide the audio downsampling", self.resnet_stages));
                }
                if self.stem_kernel < 4 || self.stem_kernel % 2 != 0 {
                    return bad("audio stem kernel must be even and at least 4".into());
                }
            }
        }
        if self.conformer && self.conformer_kernel % 2 == 0 {
            return bad("conformer kernel must be odd".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub blocks: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub uses_mask_tokens: bool,
    pub max_len: usize,
}

impl PredictorConfig {
    pub fn paper() -> Self {
        PredictorConfig {
            blocks: 2,
            attention_dim: 512,
            heads: 8,
            ffn_dim: 2048,
            uses_mask_tokens: true,
            max_len: PAPER_MAX_LEN,
        }
    }

    pub fn desk() -> Self {
        PredictorConfig { blocks: 1, attention_dim: 64, heads: 4, ffn_dim: 256, ..Self::paper() }
    }

    pub fn tiny() -> Self {
        PredictorConfig { blocks: 1, attention_dim: 4, heads: 2, ffn_dim: 8, max_len: 8, ..Self::paper() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 {
            return Err(Error::Config("predictor needs at least one block".into()));
        }
        if self.heads == 0 || self.attention_dim % self.heads != 0 {
            return Err(Error::Config("predictor attention_dim not divisible by heads".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Output classes, including start, end and unknown tokens but not the
    /// CTC blank.
    pub vocab_size: usize,
    pub max_len: usize,
}

impl DecoderConfig {
    pub fn paper(vocab_size: usize) -> Self {
        DecoderConfig { layers: 6, attention_dim: 256, heads: 4, ffn_dim: 2048, vocab_size, max_len: PAPER_MAX_LEN }
    }

    pub fn desk(vocab_size: usize) -> Self {
        DecoderConfig { layers: 1, attention_dim: 64, heads: 4, ffn_dim: 256, vocab_size, max_len: 128 }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        DecoderConfig { layers: 1, attention_dim: 4, heads: 2, ffn_dim: 8, vocab_size, max_len: 8 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("decoder vocabulary needs at least two entries".into()));
        }
        if self.heads == 0 || self.attention_dim % self.heads != 0 {
            return Err(Error::Config("decoder attention_dim not divisible by heads".into()));
        }
        if self.layers == 0 || self.max_len == 0 {
            return Err(Error::Config("decoder needs layers and a positive max_len".into()));
        }
        Ok(())
    }
}

/// Deep copy used to create a momentum teacher. The copy shares no storage
/// with the student, so later student updates leave it untouched.
pub fn clone_as_teacher(student: &ModelWeights) -> Result<ModelWeights> {
    student.deep_copy()
}

/// Visual recognition model: video encoder, CTC projection and decoder.
/// Parameters live in one store under the `encoder.`, `ctc.` and `decoder.`
/// prefixes.
#[derive(Debug, Clone)]
pub struct VsrModel {
    pub encoder: Encoder,
    pub ctc: CtcHead,
    pub decoder: Decoder,
}

pub const ENCODER_PREFIX: &str = "encoder.";

impl VsrModel {
    /// Fresh model. The encoder and head are seeded independently, so an
    /// encoder later overwritten with pre-trained weights does not change
    /// how the head is drawn.
    pub fn build(enc: &EncoderConfig, dec: &DecoderConfig, seed: u64, dtype: DType) -> Result<(Self, ModelWeights)> {
        if enc.modality != Modality::Video {
            return Err(Error::Config("recognition model needs a video encoder".into()));
        }
        let (encoder, enc_w) = Encoder::build(enc, crate::seed::derive(seed, "vsr_encoder", &[]), dtype)?;
        let mut init = Init::new(crate::seed::derive(seed, "vsr_head", &[]), dtype);
        let ctc = CtcHead::new(&mut init, "ctc", enc.attention_dim, dec.vocab_size)?;
        let decoder = Decoder::new(&mut init, "decoder", dec, enc.attention_dim)?;
        let mut weights = init.finish();
        for (name, var) in enc_w.iter() {
            weights.insert(format!("{ENCODER_PREFIX}{name}"), var.clone())?;
        }
        Ok((VsrModel { encoder, ctc, decoder }, weights))
    }

    pub fn encoder_weights(w: &ModelWeights) -> ModelWeights {
        w.strip_prefix(ENCODER_PREFIX)
    }

    /// `(1, T, D)` encoder memory for a `(T, H, W)` clip.
    pub fn encode(&self, w: &ModelWeights, video: &Tensor) -> Result<Tensor> {
        self.encoder.forward(&Self::encoder_weights(w), video)
    }
}
