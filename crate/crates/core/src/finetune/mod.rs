//! Recognition fine-tuning: tokenizers, the joint CTC/attention objective
//! and the training loop.

pub mod ctc;
mod tokenizer;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use ctc::{ctc_loss, ctc_loss_and_grad, ctc_loss_tensor, min_frames};
pub use tokenizer::{build_tokenizer, Tokenizer, TokenizerKind, BLANK, EOS, SOS, UNK, WORD_MARK};

use crate::corpus::CorpusManifest;
use crate::datapipe::{self, Modality, PreprocessStats, VideoClip, CROP_SIZE};
use crate::decode::{self, BeamConfig};
use crate::error::{Error, Result};
use crate::model::{video_tensor, Checkpoint, DecoderConfig, EncoderConfig, ModelWeights, VsrModel, ENCODER_PREFIX};
use crate::optim::{AdamW, AdamWConfig, GradAccumulator};
use crate::pretrain::{self, LrSchedule, Precision};
use crate::seed;

/// `base * decay^depth_from_top`.
pub fn layerwise_lr(base: f64, depth_from_top: usize, decay: f64) -> f64 {
    base * decay.powi(depth_from_top as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLossValue {
    pub ctc: f64,
    pub attention: f64,
    pub combined: f64,
}

pub fn joint_loss(ctc: f64, attention: f64, ctc_weight: f64) -> JointLossValue {
    JointLossValue { ctc, attention, combined: ctc_weight * ctc + (1.0 - ctc_weight) * attention }
}

/// Mean negative log-likelihood of `target` (end token included) under
/// teacher-forced decoder rows.
pub fn attention_loss(rows: &[Vec<f64>], target: &[u32]) -> Result<f64> {
    if rows.len() != target.len() || target.is_empty() {
        return Err(Error::Shape(format!("{} decoder rows for {} targets", rows.len(), target.len())));
    }
    let mut nll = 0.0;
    for (row, &y) in rows.iter().zip(target) {
        let lp = row
            .get(y as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("target {y} outside vocabulary")))?;
        nll -= lp;
    }
    Ok(nll / target.len() as f64)
}

/// Differentiable form of [`attention_loss`] on `(L, V)` log-probabilities.
pub fn attention_loss_tensor(lp: &Tensor, target: &[u32]) -> Result<Tensor> {
    let (l, v) = lp.dims2()?;
    if l != target.len() || l == 0 {
        return Err(Error::Shape(format!("{l} decoder rows for {} targets", target.len())));
    }
    let mut onehot = vec![0f64; l * v];
    for (i, &y) in target.iter().enumerate() {
        if y as usize >= v {
            return Err(Error::InvalidArgument(format!("target {y} outside vocabulary")));
        }
        onehot[i * v + y as usize] = -1.0 / l as f64;
    }
    let onehot = Tensor::from_vec(onehot, (l, v), &Device::Cpu)?.to_dtype(lp.dtype())?;
    Ok((lp * onehot)?.sum_all()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub layers: usize,
    pub attention_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl DecoderShape {
    pub fn with_vocab(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            layers: self.layers,
            attention_dim: self.attention_dim,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            vocab_size,
            max_len: self.max_len,
        }
    }

    fn from_config(c: &DecoderConfig) -> Self {
        DecoderShape { layers: c.layers, attention_dim: c.attention_dim, heads: c.heads, ffn_dim: c.ffn_dim, max_len: c.max_len }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderShape,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub layer_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub optimizer: AdamWConfig,
    pub ctc_weight_train: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub heldout_fraction: f64,
    /// `None` picks characters for Mandarin and subwords otherwise.
    pub tokenizer_kind: Option<TokenizerKind>,
    pub vocab_size: usize,
    pub augment: bool,
    pub precision: Precision,
    /// Held-out evaluation every this many epochs; 0 evaluates after the
    /// last epoch only.
    pub eval_every: usize,
    pub beam: BeamConfig,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn paper() -> Self {
        FinetuneConfig {
            encoder: EncoderConfig::paper(Modality::Video),
            decoder: DecoderShape::from_config(&DecoderConfig::paper(2)),
            encoder_lr: 1e-3,
            decoder_lr: 5e-3,
            layer_decay: 0.5,
            epochs: 50,
            warmup_epochs: 20.0,
            optimizer: AdamWConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8, weight_decay: 0.1 },
            ctc_weight_train: 0.1,
            grad_clip: 1.0,
            batch_size: 8,
            heldout_fraction: 0.1,
            tokenizer_kind: None,
            vocab_size: 1000,
            augment: true,
            precision: Precision::F32,
            eval_every: 1,
            beam: BeamConfig::default(),
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        FinetuneConfig {
            encoder: EncoderConfig::desk(Modality::Video),
            decoder: DecoderShape::from_config(&DecoderConfig::desk(2)),
            epochs: 60,
            warmup_epochs: 5.0,
            batch_size: 1,
            eval_every: 0,
            beam: BeamConfig { beam_size: 4, ..BeamConfig::default() },
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.beam.validate()?;
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(Error::Config("layer_decay must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight_train) {
            return Err(Error::Config("ctc_weight_train must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config("heldout_fraction must lie in [0, 1)".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        self.schedule().validate()
    }

    /// Unit-peak warm-up/cosine shape shared by every parameter group.
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak: 1.0, warmup_epochs: self.warmup_epochs, total_epochs: self.epochs as f64 }
    }

    /// Rate of an encoder parameter `depth` levels below the top at
    /// `epoch_fraction`.
    pub fn encoder_lr_at(&self, depth: usize, epoch_fraction: f64) -> f64 {
        layerwise_lr(self.encoder_lr, depth, self.layer_decay) * self.schedule().lr_at(epoch_fraction)
    }

    pub fn decoder_lr_at(&self, epoch_fraction: f64) -> f64 {
        self.decoder_lr * self.schedule().lr_at(epoch_fraction)
    }
}

/// How the encoder starts.
#[derive(Debug, Clone)]
pub enum EncoderInit {
    Random,
    Pretrained(PathBuf),
}

/// Builds a recognition model whose encoder is copied from the video
/// student of a pre-training checkpoint. The CTC projection and decoder are
/// fresh draws from `seed`.
pub fn init_from_pretrained(
    checkpoint: &Path,
    encoder: &EncoderConfig,
    decoder: &DecoderConfig,
    seed: u64,
    dtype: DType,
) -> Result<(VsrModel, ModelWeights)> {
    let ck = Checkpoint::load(checkpoint, None)?;
    if ck.kind != "pretrain" {
        return Err(Error::checkpoint(checkpoint, format!("expected a pre-training checkpoint, found `{}`", ck.kind)));
    }
    let video_cfg: EncoderConfig = serde_json::from_value(
        ck.config
            .pointer("/model/video")
            .cloned()
            .ok_or_else(|| Error::checkpoint(checkpoint, "config lacks the video encoder"))?,
    )?;
    if &video_cfg != encoder {
        return Err(Error::Config("pre-trained video encoder config differs from the fine-tuning encoder".into()));
    }
    let (model, weights) = VsrModel::build(encoder, decoder, seed, dtype)?;
    weights.load_from(ENCODER_PREFIX, ck.group(pretrain::GROUP_STUDENT_VIDEO)?)?;
    Ok((model, weights))
}

/// Splits off `fraction` of the records as a held-out set, chosen by seed.
/// Both parts keep manifest order.
pub fn split_heldout(manifest: &CorpusManifest, fraction: f64, seed_value: u64) -> (CorpusManifest, CorpusManifest) {
    let n = manifest.len();
    let mut held = if fraction > 0.0 && n >= 2 { ((n as f64 * fraction).round() as usize).max(1) } else { 0 };
    held = held.min(n.saturating_sub(1));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_value, "heldout", &[]));
    let mut is_held = vec![false; n];
    for &i in &idx[..held] {
        is_held[i] = true;
    }
    let pick = |want: bool| {
        manifest
            .records
            .iter()
            .zip(&is_held)
            .filter(|(_, &h)| h == want)
            .map(|(r, _)| r.clone())
            .collect::<Vec<_>>()
    };
    (
        manifest.derive(format!("{}-train", manifest.name), pick(false)),
        manifest.derive(format!("{}-heldout", manifest.name), pick(true)),
    )
}

/// The single language of a fully transcribed manifest.
pub fn single_language(manifest: &CorpusManifest) -> Result<String> {
    let langs = manifest.languages();
    if langs.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning runs on one language at a time, manifest has {langs:?}"
        )));
    }
    if let Some(r) = manifest.records.iter().find(|r| !r.is_labelled()) {
        return Err(Error::InvalidRecord { id: r.id.clone(), msg: "fine-tuning record without transcript".into() });
    }
    Ok(langs[0].clone())
}

/// Joint objective of one clip. Returns the graph node and its parts.
pub fn example_loss(
    model: &VsrModel,
    weights: &ModelWeights,
    video: &Tensor,
    target: &[u32],
    tok: &Tokenizer,
    ctc_weight: f64,
) -> Result<(Tensor, JointLossValue)> {
    let memory = model.encode(weights, video)?;
    let ctc_lp = model.ctc.forward(weights, &memory)?;
    let labels: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    let (ctc_node, ctc_value) = ctc_loss_tensor(&ctc_lp, &labels, tok.blank() as usize)?;
    let mut input = vec![tok.sos()];
    input.extend_from_slice(target);
    let mut output = target.to_vec();
    output.push(tok.eos());
    let att_lp = model.decoder.forward(weights, &[input], &memory)?.squeeze(0)?;
    let att_node = attention_loss_tensor(&att_lp, &output)?;
    let att_value = att_node.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let node = if ctc_value.is_finite() && ctc_weight > 0.0 {
        ((ctc_node * ctc_weight)? + (att_node * (1.0 - ctc_weight))?)?
    } else {
        if !ctc_value.is_finite() {
            warn!("CTC target does not fit the clip; training on the attention term only");
        }
        (att_node * (1.0 - ctc_weight))?
    };
    Ok((node, joint_loss(ctc_value, att_value, ctc_weight)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_ctc: f64,
    pub train_attention: f64,
    pub encoder_top_lr: f64,
    pub decoder_lr: f64,
    pub heldout_cer: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: PathBuf,
    pub tokenizer: PathBuf,
    pub metrics: PathBuf,
    pub epochs: Vec<EpochMetrics>,
    pub train_manifest: CorpusManifest,
    pub heldout_manifest: CorpusManifest,
}

impl FinetuneOutcome {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map(|e| e.train_loss).unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, Default)]
pub struct FinetuneOptions {
    pub stats: Option<PreprocessStats>,
    /// Stop after this many optimizer steps (the schedule still spans
    /// `epochs`).
    pub max_steps: Option<usize>,
}

/// Everything needed to rebuild a fine-tuned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VsrCheckpointConfig {
    pub finetune: FinetuneConfig,
    pub decoder: DecoderConfig,
    pub language: String,
    pub stats: PreprocessStats,
}

pub fn load_vsr(path: &Path) -> Result<(VsrModel, ModelWeights, VsrCheckpointConfig)> {
    let ck = Checkpoint::load(path, None)?;
    if ck.kind != "finetune" {
        return Err(Error::checkpoint(path, format!("expected a fine-tuned checkpoint, found `{}`", ck.kind)));
    }
    let info: VsrCheckpointConfig = serde_json::from_value(ck.config.clone())?;
    let dtype = info.finetune.precision.dtype();
    let (model, weights) = VsrModel::build(&info.finetune.encoder, &info.decoder, info.finetune.seed, dtype)?;
    weights.load_from("", ck.group("vsr")?)?;
    Ok((model, weights, info))
}

fn prepare_view<R: rand::Rng + ?Sized>(clip: &VideoClip, augment: bool, rng: &mut R) -> VideoClip {
    if clip.height == CROP_SIZE && clip.width == CROP_SIZE {
        clip.clone()
    } else if augment {
        datapipe::augment(clip, rng)
    } else {
        datapipe::center_crop(clip)
    }
}

/// Fine-tunes on a single-language transcribed manifest and writes the
/// tokenizer, per-epoch metrics and the final checkpoint into `out_dir`.
pub fn run_finetuning(
    cfg: &FinetuneConfig,
    manifest: &CorpusManifest,
    init: &EncoderInit,
    out_dir: &Path,
    opts: &FinetuneOptions,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let language = single_language(manifest)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train, heldout) = split_heldout(manifest, cfg.heldout_fraction, cfg.seed);
    let transcripts: Vec<String> = train.records.iter().filter_map(|r| r.transcript.clone()).collect();
    let kind = cfg.tokenizer_kind.unwrap_or_else(|| TokenizerKind::for_language(&language));
    let tok = build_tokenizer(&transcripts, &language, kind, cfg.vocab_size)?;
    let tok_path = out_dir.join("tokenizer.txt");
    tok.save(&tok_path)?;

    let dtype = cfg.precision.dtype();
    let dec_cfg = cfg.decoder.with_vocab(tok.decoder_vocab_size());
    let (model, weights) = match init {
        EncoderInit::Random => VsrModel::build(&cfg.encoder, &dec_cfg, cfg.seed, dtype)?,
        EncoderInit::Pretrained(p) => init_from_pretrained(p, &cfg.encoder, &dec_cfg, cfg.seed, dtype)?,
    };
    let stats = match opts.stats {
        Some(s) => s,
        None => datapipe::compute_stats(manifest)?,
    };
    stats.save(&out_dir.join("stats.json"))?;

    let clips: Vec<VideoClip> = train
        .records
        .iter()
        .map(|r| datapipe::load_record(&train, r, &stats).map(|(v, _)| v))
        .collect::<Result<_>>()?;
    let targets: Vec<Vec<u32>> = transcripts.iter().map(|t| tok.encode(t)).collect();
    let depth: BTreeMap<String, usize> = weights
        .names()
        .filter_map(|n| n.strip_prefix(ENCODER_PREFIX).map(|s| (n.clone(), model.encoder.depth_from_top(s))))
        .collect();

    let steps_per_epoch = clips.len().div_ceil(cfg.batch_size);
    let mut opt = AdamW::new(cfg.optimizer);
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut log = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let max_steps = opts.max_steps.unwrap_or(usize::MAX);
    for epoch in 0..cfg.epochs {
        if step >= max_steps {
            break;
        }
        let order = pretrain::epoch_order(clips.len(), cfg.seed, epoch);
        let (mut sum, mut sum_ctc, mut sum_att, mut n) = (0.0, 0.0, 0.0, 0usize);
        let mut lrs = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break;
            }
            let frac = step as f64 / steps_per_epoch as f64;
            let mut grads = GradAccumulator::new();
            for (j, &i) in chunk.iter().enumerate() {
                let mut rng = seed::rng(cfg.seed, "finetune_example", &[step as u64, j as u64]);
                let view = prepare_view(&clips[i], cfg.augment, &mut rng);
                let (node, value) = example_loss(&model, &weights, &video_tensor(&view)?, &targets[i], &tok, cfg.ctc_weight_train)?;
                let store = node.backward()?;
                grads.add("vsr", &weights, &store, 1.0 / chunk.len() as f64)?;
                sum += value.combined;
                sum_ctc += value.ctc;
                sum_att += value.attention;
                n += 1;
            }
            if cfg.grad_clip > 0.0 {
                grads.clip(cfg.grad_clip)?;
            }
            let enc_lr = |d: usize| cfg.encoder_lr_at(d, frac);
            let dec_lr = cfg.decoder_lr_at(frac);
            lrs = (enc_lr(0), dec_lr);
            opt.begin_step();
            opt.update_group("vsr", &weights, &grads, |name| match depth.get(name) {
                Some(&d) => enc_lr(d),
                None => dec_lr,
            })?;
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs || step >= max_steps;
        let heldout_cer = if !heldout.is_empty() && (last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0)) {
            let report = decode::evaluate(&model, &weights, &heldout, &stats, &cfg.beam, &tok, "")?;
            Some(report.corpus_cer)
        } else {
            None
        };
        let m = EpochMetrics {
            epoch,
            steps: step,
            train_loss: sum / n.max(1) as f64,
            train_ctc: sum_ctc / n.max(1) as f64,
            train_attention: sum_att / n.max(1) as f64,
            encoder_top_lr: lrs.0,
            decoder_lr: lrs.1,
            heldout_cer,
        };
        info!("epoch {epoch}: loss {:.4} (ctc {:.3}, att {:.3})", m.train_loss, m.train_ctc, m.train_attention);
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&metrics_path, e))?;
        epochs.push(m);
    }

    let info = VsrCheckpointConfig { finetune: cfg.clone(), decoder: dec_cfg, language, stats };
    let ck = Checkpoint {
        kind: "finetune".into(),
        config: serde_json::to_value(&info)?,
        step,
        groups: BTreeMap::from([("vsr".to_string(), weights.clone())]),
    };
    let fp = seed::fingerprint_json(&info);
    let checkpoint = out_dir.join(format!("finetune_step{step}_{fp}.safetensors"));
    ck.save(&checkpoint)?;
    Ok(FinetuneOutcome { checkpoint, tokenizer: tok_path, metrics: metrics_path, epochs, train_manifest: train, heldout_manifest: heldout })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layerwise_rates() {
        assert_eq!(layerwise_lr(1e-3, 0, 0.5), 1e-3);
        assert_eq!(layerwise_lr(1e-3, 1, 0.5), 5e-4);
        assert_eq!(layerwise_lr(1e-3, 7, 1.0), 1e-3);
        let mut prev = f64::INFINITY;
        for d in 0..13 {
            let lr = layerwise_lr(1e-3, d, 0.5);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn warmup_midpoint_top_layer_rate() {
        let cfg = FinetuneConfig::paper();
        assert!((cfg.encoder_lr_at(0, 10.0) - 5e-4).abs() < 1e-15);
        assert!((cfg.encoder_lr_at(0, 20.0) - 1e-3).abs() < 1e-15);
        assert!((cfg.decoder_lr_at(20.0) - 5e-3).abs() < 1e-15);
    }

    #[test]
    fn attention_loss_cases() {
        let onehot = vec![vec![0.0, f64::NEG_INFINITY], vec![f64::NEG_INFINITY, 0.0]];
        assert_eq!(attention_loss(&onehot, &[0, 1]).unwrap(), 0.0);
        let q = 0.25f64.ln();
        let uniform = vec![vec![q; 4]; 3];
        assert!((attention_loss(&uniform, &[0, 3, 2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let rows = vec![vec![0.3f64.ln(), 0.7f64.ln()], vec![0.9f64.ln(), 0.1f64.ln()]];
        let expect = -(0.7f64.ln() + 0.9f64.ln()) / 2.0;
        assert!((attention_loss(&rows, &[1, 0]).unwrap() - expect).abs() < 1e-12);
        let t = Tensor::from_vec(rows.concat(), (2, 2), &Device::Cpu).unwrap();
        let v = attention_loss_tensor(&t, &[1, 0]).unwrap().to_scalar::<f64>().unwrap();
        assert!((v - expect).abs() < 1e-12);
        assert!(attention_loss(&rows, &[1]).is_err());
    }

    #[test]
    fn joint_linearity() {
        for w in [0.0, 0.1, 1.0] {
            let j = joint_loss(2.0, 3.0, w);
            assert_eq!(j.combined, w * 2.0 + (1.0 - w) * 3.0);
        }
    }
}
