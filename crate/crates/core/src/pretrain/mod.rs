//! Masked student / momentum teacher pre-training.

mod loss;
mod schedule;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use log::{error, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use loss::{cosine_sim, cosine_sim_tensor, raven_loss, LossBreakdown, LossInputs, LossSupport, COSINE_EPS};
pub use schedule::{lr_at, tau_schedule, LrSchedule};

use crate::corpus::CorpusManifest;
use crate::datapipe::{
    self, apply_mask, derive_audio_mask, sample_frame_mask, AudioClip, MaskSpec, Modality, PreprocessStats, VideoClip,
    AUDIO_MASK_SCALE, CROP_SIZE, MASK_SPAN, MASK_START_PROB,
};
use crate::error::{Error, Result};
use crate::model::{
    audio_tensor, clone_as_teacher, video_tensor, Checkpoint, Encoder, EncoderConfig, ModelWeights, Predictor,
    PredictorConfig,
};
use crate::optim::{AdamW, AdamWConfig, GradAccumulator};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSupportMode {
    All,
    MaskedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainModelConfig {
    pub video: EncoderConfig,
    pub audio: EncoderConfig,
    pub predictor: PredictorConfig,
}

impl PretrainModelConfig {
    pub fn paper() -> Self {
        PretrainModelConfig {
            video: EncoderConfig::paper(Modality::Video),
            audio: EncoderConfig::paper(Modality::Audio),
            predictor: PredictorConfig::paper(),
        }
    }

    pub fn desk() -> Self {
        PretrainModelConfig {
            video: EncoderConfig::desk(Modality::Video),
            audio: EncoderConfig::desk(Modality::Audio),
            predictor: PredictorConfig::desk(),
        }
    }

    pub fn tiny() -> Self {
        PretrainModelConfig {
            video: EncoderConfig::tiny(Modality::Video),
            audio: EncoderConfig::tiny(Modality::Audio),
            predictor: PredictorConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: PretrainModelConfig,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub peak_lr: f64,
    pub batch_size: usize,
    pub tau0: f64,
    pub optimizer: AdamWConfig,
    pub mask_prob: f64,
    pub mask_span: usize,
    /// Reuse the video frame mask for audio instead of drawing its own.
    pub shared_mask: bool,
    pub loss_support: LossSupportMode,
    /// Random 88x88 crops and flips; otherwise a center crop.
    pub augment: bool,
    pub precision: Precision,
    /// Save a checkpoint every this many steps; 0 saves only the last.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn paper() -> Self {
        PretrainConfig {
            model: PretrainModelConfig::paper(),
            epochs: 150,
            warmup_epochs: 40.0,
            peak_lr: 3e-3,
            batch_size: 8,
            tau0: 0.999,
            optimizer: AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.04 },
            mask_prob: MASK_START_PROB,
            mask_span: MASK_SPAN,
            shared_mask: false,
            loss_support: LossSupportMode::All,
            augment: true,
            precision: Precision::F32,
            checkpoint_every: 0,
            seed: 0,
        }
    }

    /// Desk-scale model; 30 epochs with a 10-clip corpus and batch 1 give
    /// 300 optimizer steps.
    pub fn desk() -> Self {
        PretrainConfig {
            model: PretrainModelConfig::desk(),
            epochs: 30,
            warmup_epochs: 3.0,
            peak_lr: 1e-3,
            batch_size: 1,
            tau0: 0.99,
            checkpoint_every: 100,
            ..Self::paper()
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { peak: self.peak_lr, warmup_epochs: self.warmup_epochs, total_epochs: self.epochs as f64 }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.video.validate()?;
        self.model.audio.validate()?;
        self.model.predictor.validate()?;
        if self.model.video.modality != Modality::Video || self.model.audio.modality != Modality::Audio {
            return Err(Error::Config("encoder modalities are swapped".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.tau0 > 0.0 && self.tau0 <= 1.0) {
            return Err(Error::Config("tau0 must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) || self.mask_span == 0 {
            return Err(Error::Config("mask probability in [0, 1] and span >= 1 required".into()));
        }
        self.schedule().validate()
    }

    pub fn fingerprint(&self) -> String {
        seed::fingerprint_json(self)
    }
}

/// Encoders and predictors. Holds structure only; weights live in
/// [`PretrainState`].
#[derive(Debug, Clone)]
pub struct PretrainModel {
    pub video: Encoder,
    pub audio: Encoder,
    pub pred_av: Predictor,
    pub pred_aa: Predictor,
    pub pred_va: Predictor,
}

pub const GROUP_STUDENT_VIDEO: &str = "student_video";
pub const GROUP_STUDENT_AUDIO: &str = "student_audio";
pub const GROUP_TEACHER_VIDEO: &str = "teacher_video";
pub const GROUP_TEACHER_AUDIO: &str = "teacher_audio";
pub const GROUP_PRED_AV: &str = "pred_av";
pub const GROUP_PRED_AA: &str = "pred_aa";
pub const GROUP_PRED_VA: &str = "pred_va";
const GROUP_ADAM_M: &str = "adam_m";
const GROUP_ADAM_V: &str = "adam_v";

#[derive(Debug, Clone)]
pub struct PretrainState {
    pub student_video: ModelWeights,
    pub student_audio: ModelWeights,
    pub teacher_video: ModelWeights,
    pub teacher_audio: ModelWeights,
    pub pred_av: ModelWeights,
    pub pred_aa: ModelWeights,
    pub pred_va: ModelWeights,
    pub step: usize,
    pub total_steps: usize,
    pub tau0: f64,
    pub optimizer: AdamW,
}

impl PretrainModel {
    /// Builds the networks and a fresh state whose teachers are copies of
    /// the students.
    pub fn init(cfg: &PretrainConfig, total_steps: usize) -> Result<(Self, PretrainState)> {
        cfg.validate()?;
        let dtype = cfg.precision.dtype();
        let s = |tag: &str| seed::derive(cfg.seed, tag, &[]);
        let m = &cfg.model;
        let (video, student_video) = Encoder::build(&m.video, s("video_encoder"), dtype)?;
        let (audio, student_audio) = Encoder::build(&m.audio, s("audio_encoder"), dtype)?;
        let (dv, da) = (m.video.attention_dim, m.audio.attention_dim);
        let (pred_av, w_av) = Predictor::build(&m.predictor, da, dv, s("pred_av"), dtype)?;
        let (pred_aa, w_aa) = Predictor::build(&m.predictor, da, da, s("pred_aa"), dtype)?;
        let (pred_va, w_va) = Predictor::build(&m.predictor, dv, da, s("pred_va"), dtype)?;
        let state = PretrainState {
            teacher_video: clone_as_teacher(&student_video)?,
            teacher_audio: clone_as_teacher(&student_audio)?,
            student_video,
            student_audio,
            pred_av: w_av,
            pred_aa: w_aa,
            pred_va: w_va,
            step: 0,
            total_steps,
            tau0: cfg.tau0,
            optimizer: AdamW::new(cfg.optimizer),
        };
        Ok((PretrainModel { video, audio, pred_av, pred_aa, pred_va }, state))
    }
}

impl PretrainState {
    /// Groups updated by the optimizer.
    pub fn trainable(&self) -> [(&'static str, &ModelWeights); 5] {
        [
            (GROUP_STUDENT_VIDEO, &self.student_video),
            (GROUP_STUDENT_AUDIO, &self.student_audio),
            (GROUP_PRED_AV, &self.pred_av),
            (GROUP_PRED_AA, &self.pred_aa),
            (GROUP_PRED_VA, &self.pred_va),
        ]
    }

    pub fn teachers(&self) -> [(&'static str, &ModelWeights); 2] {
        [(GROUP_TEACHER_VIDEO, &self.teacher_video), (GROUP_TEACHER_AUDIO, &self.teacher_audio)]
    }

    /// Moves both teachers toward their students.
    pub fn ema_update(&self, tau: f64) -> Result<()> {
        ema_update(&self.teacher_video, &self.student_video, tau)?;
        ema_update(&self.teacher_audio, &self.student_audio, tau)
    }

    pub fn to_checkpoint(&self, cfg: &PretrainConfig) -> Result<Checkpoint> {
        let mut groups = std::collections::BTreeMap::new();
        for (name, w) in self.trainable().into_iter().chain(self.teachers()) {
            groups.insert(name.to_string(), w.clone());
        }
        let (m, v) = self.optimizer.state()?;
        groups.insert(GROUP_ADAM_M.to_string(), m);
        groups.insert(GROUP_ADAM_V.to_string(), v);
        Ok(Checkpoint { kind: "pretrain".into(), config: serde_json::to_value(cfg)?, step: self.step, groups })
    }

    /// Restores a state saved by [`PretrainState::to_checkpoint`], checking
    /// every group against the structure of a fresh `template`.
    pub fn from_checkpoint(ck: &Checkpoint, template: &PretrainState) -> Result<Self> {
        let take = |name: &str, like: &ModelWeights| -> Result<ModelWeights> {
            let w = ck.group(name)?;
            like.ensure_same_structure(w)
                .map_err(|_| Error::Config(format!("checkpoint group `{name}` does not match the model")))?;
            w.to_dtype(like.dtype())
        };
        let empty = ModelWeights::new();
        let m = ck.groups.get(GROUP_ADAM_M).unwrap_or(&empty);
        let v = ck.groups.get(GROUP_ADAM_V).unwrap_or(&empty);
        Ok(PretrainState {
            student_video: take(GROUP_STUDENT_VIDEO, &template.student_video)?,
            student_audio: take(GROUP_STUDENT_AUDIO, &template.student_audio)?,
            teacher_video: take(GROUP_TEACHER_VIDEO, &template.teacher_video)?,
            teacher_audio: take(GROUP_TEACHER_AUDIO, &template.teacher_audio)?,
            pred_av: take(GROUP_PRED_AV, &template.pred_av)?,
            pred_aa: take(GROUP_PRED_AA, &template.pred_aa)?,
            pred_va: take(GROUP_PRED_VA, &template.pred_va)?,
            step: ck.step,
            total_steps: template.total_steps,
            tau0: template.tau0,
            optimizer: AdamW::restore(template.optimizer.cfg, ck.step, m, v),
        })
    }
}

/// `teacher <- tau * teacher + (1 - tau) * student`, parameter by parameter.
pub fn ema_update(teacher: &ModelWeights, student: &ModelWeights, tau: f64) -> Result<()> {
    teacher.ensure_same_structure(student)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("momentum {tau} outside [0, 1]")));
    }
    for ((_, xi), (_, theta)) in teacher.iter().zip(student.iter()) {
        let next = ((xi.as_tensor() * tau)? + (theta.as_tensor() * (1.0 - tau))?)?;
        xi.set(&next.detach())?;
    }
    Ok(())
}

/// One clip ready for a pre-training step: clean inputs for the teachers,
/// zeroed inputs for the students and the frame-level masks.
#[derive(Debug, Clone)]
pub struct PretrainExample {
    pub video: Tensor,
    pub audio: Tensor,
    pub video_masked: Tensor,
    pub audio_masked: Tensor,
    pub video_mask: MaskSpec,
    /// Frame-level audio mask; the sample-level mask is this times 640.
    pub audio_frame_mask: MaskSpec,
}

pub fn prepare_example<R: rand::Rng + ?Sized>(
    video: &VideoClip,
    audio: &AudioClip,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainExample> {
    let t = video.len;
    if audio.samples.len() != t * AUDIO_MASK_SCALE {
        return Err(Error::Shape(format!(
            "`{}`: {} audio samples for {t} frames",
            video.source_id,
            audio.samples.len()
        )));
    }
    if video.height < CROP_SIZE || video.width < CROP_SIZE {
        return Err(Error::Shape(format!(
            "`{}`: {}x{} frames are smaller than the {CROP_SIZE}x{CROP_SIZE} crop",
            video.source_id, video.height, video.width
        )));
    }
    let view = if video.height == CROP_SIZE && video.width == CROP_SIZE {
        video.clone()
    } else if cfg.augment {
        datapipe::augment(video, rng)
    } else {
        datapipe::center_crop(video)
    };
    let video_mask = sample_frame_mask(t, cfg.mask_prob, cfg.mask_span, rng);
    let audio_frame_mask = if cfg.shared_mask {
        video_mask.clone()
    } else {
        sample_frame_mask(t, cfg.mask_prob, cfg.mask_span, rng)
    };
    let audio_mask = derive_audio_mask(&audio_frame_mask, AUDIO_MASK_SCALE)?;
    let mut audio_frame_mask = audio_frame_mask;
    audio_frame_mask.modality = Modality::Audio;
    Ok(PretrainExample {
        video: video_tensor(&view)?,
        audio: audio_tensor(audio)?,
        video_masked: video_tensor(&apply_mask(&view, &video_mask)?)?,
        audio_masked: audio_tensor(&apply_mask(audio, &audio_mask)?)?,
        video_mask,
        audio_frame_mask,
    })
}

/// Objective (negated similarity sum) and breakdown for one clip.
pub fn example_loss(
    model: &PretrainModel,
    state: &PretrainState,
    ex: &PretrainExample,
    support: LossSupportMode,
) -> Result<(Tensor, LossBreakdown)> {
    let e_t_v = model.video.forward(&state.teacher_video, &ex.video)?.detach();
    let e_t_a = model.audio.forward(&state.teacher_audio, &ex.audio)?.detach();
    let s_v = model.video.forward(&state.student_video, &ex.video_masked)?;
    let s_a = model.audio.forward(&state.student_audio, &ex.audio_masked)?;
    let v_flags = ex.video_mask.flags();
    let a_flags = ex.audio_frame_mask.flags();
    let inputs = LossInputs {
        p_a_to_v: model.pred_av.forward(&state.pred_av, &s_a, &a_flags)?,
        p_v_to_a: model.pred_va.forward(&state.pred_va, &s_v, &v_flags)?,
        p_a_to_a: model.pred_aa.forward(&state.pred_aa, &s_a, &a_flags)?,
        e_t_v,
        e_t_a,
    };
    let support = match support {
        LossSupportMode::All => LossSupport::default(),
        LossSupportMode::MaskedOnly => LossSupport { audio_masked: Some(&a_flags), video_masked: Some(&v_flags) },
    };
    raven_loss(&inputs, &support)
}

/// Gradients of the mean objective over `batch`, plus the mean breakdown.
pub fn batch_gradients(
    model: &PretrainModel,
    state: &PretrainState,
    batch: &[PretrainExample],
    support: LossSupportMode,
) -> Result<(GradAccumulator, LossBreakdown)> {
    let mut grads = GradAccumulator::new();
    let mut parts = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len().max(1) as f64;
    for ex in batch {
        let (objective, b) = example_loss(model, state, ex, support)?;
        if !b.is_finite() {
            error!(
                "non-finite loss at step {}: term_av={} term_va={} term_aa={}",
                state.step, b.term_av, b.term_va, b.term_aa
            );
            return Err(Error::NonFiniteLoss { step: state.step, term_av: b.term_av, term_va: b.term_va, term_aa: b.term_aa });
        }
        let store = objective.backward()?;
        for (group, w) in state.trainable() {
            grads.add(group, w, &store, scale)?;
        }
        parts.push(b);
    }
    Ok((grads, LossBreakdown::mean(&parts)))
}

/// Record of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub term_av: f64,
    pub term_va: f64,
    pub term_aa: f64,
    pub total: f64,
    pub tau: f64,
    pub lr: f64,
}

/// One AdamW step on the negated similarity sum followed by the teacher
/// momentum update.
pub fn pretrain_step(
    model: &PretrainModel,
    state: &mut PretrainState,
    batch: &[PretrainExample],
    cfg: &PretrainConfig,
    steps_per_epoch: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let (grads, b) = batch_gradients(model, state, batch, cfg.loss_support)?;
    let lr = cfg.schedule().lr_at_step(state.step, steps_per_epoch);
    state.optimizer.begin_step();
    let trainable: Vec<(&str, ModelWeights)> = state.trainable().iter().map(|(n, w)| (*n, (*w).clone())).collect();
    for (group, w) in &trainable {
        state.optimizer.update_group(group, w, &grads, |_| lr)?;
    }
    let tau = tau_schedule(state.step, state.total_steps, state.tau0);
    state.ema_update(tau)?;
    let metrics = StepMetrics {
        step: state.step,
        term_av: b.term_av,
        term_va: b.term_va,
        term_aa: b.term_aa,
        total: b.total,
        tau,
        lr,
    };
    state.step += 1;
    Ok(metrics)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop after this many total steps, as if interrupted.
    pub stop_after: Option<usize>,
    /// Standardization statistics; computed from the manifest when absent.
    pub stats: Option<PreprocessStats>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps: usize,
    pub completed: bool,
}

pub fn checkpoint_name(step: usize, fingerprint: &str) -> String {
    format!("pretrain_step{step}_{fingerprint}.safetensors")
}

fn latest_checkpoint(dir: &Path, fingerprint: &str) -> Option<(usize, PathBuf)> {
    let suffix = format!("_{fingerprint}.safetensors");
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let step = name.strip_prefix("pretrain_step")?.strip_suffix(&suffix)?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
}

/// Loads every clip of the manifest once, in manifest order.
pub fn load_clips(manifest: &CorpusManifest, stats: &PreprocessStats) -> Result<Vec<(VideoClip, AudioClip)>> {
    manifest.records.iter().map(|r| datapipe::load_record(manifest, r, stats)).collect()
}

/// Clip order of one epoch.
pub fn epoch_order(n: usize, seed_value: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed_value, "epoch_order", &[epoch as u64]));
    order
}

/// Runs (or resumes) pre-training into `out_dir`, writing checkpoints and a
/// metrics log. Returns the last checkpoint written.
pub fn run_pretraining(
    cfg: &PretrainConfig,
    manifest: &CorpusManifest,
    out_dir: &Path,
    opts: &RunOptions,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("pre-training manifest is empty".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stats = match opts.stats {
        Some(s) => s,
        None => datapipe::compute_stats(manifest)?,
    };
    stats.save(&out_dir.join("stats.json"))?;
    let clips = load_clips(manifest, &stats)?;
    let steps_per_epoch = clips.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let fp = cfg.fingerprint();
    let config_value = serde_json::to_value(cfg)?;

    let (model, mut state) = PretrainModel::init(cfg, total_steps)?;
    let metrics_path = out_dir.join("metrics.jsonl");
    let mut last_checkpoint = None;
    if let Some((step, path)) = latest_checkpoint(out_dir, &fp) {
        let ck = Checkpoint::load(&path, Some(&config_value))?;
        state = PretrainState::from_checkpoint(&ck, &state)?;
        info!("resuming pre-training from step {step}");
        truncate_metrics(&metrics_path, step)?;
        last_checkpoint = Some(path);
    } else {
        let header = serde_json::json!({
            "header": true,
            "epochs": cfg.epochs,
            "warmup_epochs": cfg.warmup_epochs,
            "peak_lr": cfg.peak_lr,
            "batch_size": cfg.batch_size,
            "steps_per_epoch": steps_per_epoch,
            "total_steps": total_steps,
            "config_fingerprint": fp,
        });
        fs::write(&metrics_path, format!("{header}\n")).map_err(|e| Error::io(&metrics_path, e))?;
    }

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let stop = opts.stop_after.unwrap_or(total_steps).min(total_steps);
    while state.step < stop {
        let k = state.step;
        let epoch = k / steps_per_epoch;
        let order = epoch_order(clips.len(), cfg.seed, epoch);
        let start = (k % steps_per_epoch) * cfg.batch_size;
        let end = (start + cfg.batch_size).min(clips.len());
        let mut batch = Vec::with_capacity(end - start);
        for (j, &i) in order[start..end].iter().enumerate() {
            let mut rng = seed::rng(cfg.seed, "pretrain_example", &[k as u64, j as u64]);
            batch.push(prepare_example(&clips[i].0, &clips[i].1, cfg, &mut rng)?);
        }
        let m = pretrain_step(&model, &mut state, &batch, cfg, steps_per_epoch)?;
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&metrics_path, e))?;
        if m.step % 10 == 0 {
            info!("step {} total {:.4} lr {:.2e} tau {:.5}", m.step, m.total, m.lr, m.tau);
        }
        let done = state.step;
        if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) || done == total_steps {
            let path = out_dir.join(checkpoint_name(done, &fp));
            state.to_checkpoint(cfg)?.save(&path)?;
            last_checkpoint = Some(path);
        }
    }
    if state.step < total_steps {
        let path = out_dir.join(checkpoint_name(state.step, &fp));
        if last_checkpoint.as_deref() != Some(path.as_path()) {
            state.to_checkpoint(cfg)?.save(&path)?;
        }
        last_checkpoint = Some(path);
    }
    let checkpoint = match last_checkpoint {
        Some(p) => p,
        None => {
            let path = out_dir.join(checkpoint_name(state.step, &fp));
            state.to_checkpoint(cfg)?.save(&path)?;
            path
        }
    };
    Ok(PretrainOutcome {
        checkpoint,
        metrics: metrics_path,
        steps: state.step,
        completed: state.step == total_steps,
    })
}

fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        let keep = match v.get("step").and_then(|s| s.as_u64()) {
            Some(s) => (s as usize) < step,
            None => true,
        };
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads the per-step rows of a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v.get("header").is_none() {
            rows.push(serde_json::from_value(v)?);
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            model: PretrainModelConfig::tiny(),
            epochs: 4,
            warmup_epochs: 1.0,
            peak_lr: 1e-2,
            batch_size: 2,
            precision: Precision::F64,
            ..PretrainConfig::desk()
        }
    }

    fn toy_clip(t: usize, side: usize, salt: f32) -> (VideoClip, AudioClip) {
        let frames = (0..t * side * side).map(|i| ((i as f32) * 0.13 + salt).sin()).collect();
        let samples = (0..t * 640).map(|i| ((i as f32) * 0.01 + salt).sin() * 0.5).collect();
        (
            VideoClip { frames, len: t, height: side, width: side, source_id: "x".into() },
            AudioClip { samples, source_id: "x".into() },
        )
    }

    #[test]
    fn ema_cases() {
        let mut init = crate::model::Init::new(0, DType::F64);
        init.constant("p", &[1], 0.0).unwrap();
        let teacher = init.finish();
        let mut init = crate::model::Init::new(0, DType::F64);
        init.constant("p", &[1], 1.0).unwrap();
        let student = init.finish();
        ema_update(&teacher, &student, 1.0).unwrap();
        assert_eq!(teacher.get("p").unwrap().to_vec1::<f64>().unwrap(), vec![0.0]);
        ema_update(&teacher, &student, 0.999).unwrap();
        let v = teacher.get("p").unwrap().to_vec1::<f64>().unwrap()[0];
        assert!((v - 0.001).abs() < 1e-15);
        ema_update(&teacher, &student, 0.0).unwrap();
        assert_eq!(teacher.get("p").unwrap().to_vec1::<f64>().unwrap(), vec![1.0]);
    }

    #[test]
    fn step_is_deterministic_and_teacher_follows_eq() {
        let cfg = tiny_cfg();
        let run = || {
            let (model, mut state) = PretrainModel::init(&cfg, 8).unwrap();
            let (v, a) = toy_clip(5, 88, 0.2);
            let mut rng = seed::rng(1, "t", &[]);
            let ex = prepare_example(&v, &a, &cfg, &mut rng).unwrap();
            // Take a step at nonzero lr so the students actually move.
            state.step = 2;
            let old_teacher = state.teacher_video.deep_copy().unwrap();
            let m = pretrain_step(&model, &mut state, &[ex], &cfg, 2).unwrap();
            (state, old_teacher, m)
        };
        let (s1, old, m) = run();
        let (s2, _, _) = run();
        assert!(s1.student_video.bitwise_eq(&s2.student_video).unwrap());
        assert!(s1.teacher_audio.bitwise_eq(&s2.teacher_audio).unwrap());
        assert!(m.lr > 0.0);
        let tau = m.tau;
        let old = old.flat_values().unwrap();
        let new_student = s1.student_video.flat_values().unwrap();
        let new_teacher = s1.teacher_video.flat_values().unwrap();
        for i in 0..old.len() {
            let expect = tau * old[i] + (1.0 - tau) * new_student[i];
            assert!((new_teacher[i] - expect).abs() < 1e-12);
        }
        assert!(!s1.student_video.bitwise_eq(&s1.teacher_video).unwrap());
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let cfg = tiny_cfg();
        let (model, state) = PretrainModel::init(&cfg, 8).unwrap();
        let (v, a) = toy_clip(4, 88, 0.5);
        let ex = prepare_example(&v, &a, &cfg, &mut seed::rng(2, "t", &[])).unwrap();
        let (objective, _) = example_loss(&model, &state, &ex, LossSupportMode::All).unwrap();
        let store = objective.backward().unwrap();
        for (_, w) in state.teachers() {
            for (_, var) in w.iter() {
                assert!(store.get(var.as_tensor()).is_none());
            }
        }
        let any_student = state.student_video.iter().any(|(_, v)| store.get(v.as_tensor()).is_some());
        assert!(any_student);
    }

    #[test]
    fn scaled_predictions_leave_similarity_unchanged() {
        let p = Tensor::randn(0f64, 1., (1, 3, 4), &Device::Cpu).unwrap();
        let e = Tensor::randn(0f64, 1., (1, 3, 4), &Device::Cpu).unwrap();
        let a = cosine_sim_tensor(&p, &e, None).unwrap().to_scalar::<f64>().unwrap();
        let b = cosine_sim_tensor(&(&p * 7.5).unwrap(), &e, None).unwrap().to_scalar::<f64>().unwrap();
        assert!((a - b).abs() < 1e-6);
    }
}
