//! Mouth-region preprocessing, training-time augmentation and the span
//! masking used by the pre-training students.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, UtteranceRecord};
use crate::error::{Error, Result};
use crate::media::{self, RawAudio, RawVideo, SAMPLES_PER_FRAME, VIDEO_FPS};

/// Side of the preprocessed mouth crop.
pub const ROI_SIZE: usize = 96;
/// Side of the training/evaluation crop taken from the mouth region.
pub const CROP_SIZE: usize = 88;
/// A sampled mask start covers this many consecutive frames, the start
/// included.
pub const MASK_SPAN: usize = 3;
pub const MASK_START_PROB: f64 = 0.2;
/// Audio samples masked per masked video frame.
pub const AUDIO_MASK_SCALE: usize = SAMPLES_PER_FRAME;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Video,
    Audio,
}

/// Grayscale frames, row-major `T x H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<f32>,
    pub len: usize,
    pub height: usize,
    pub width: usize,
    pub source_id: String,
}

impl VideoClip {
    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.frames[t * n..(t + 1) * n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for PreprocessStats {
    fn default() -> Self {
        PreprocessStats {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl PreprocessStats {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if !(std.is_finite() && std > 0.0 && mean.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "stats need finite mean and positive std, got ({mean}, {std})"
            )));
        }
        Ok(PreprocessStats { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: PreprocessStats = serde_json::from_str(&text)?;
        PreprocessStats::new(s.mean, s.std)
    }
}

fn gray(pixel: &[u8]) -> f64 {
    match pixel.len() {
        1 => f64::from(pixel[0]),
        _ => 0.299 * f64::from(pixel[0]) + 0.587 * f64::from(pixel[1]) + 0.114 * f64::from(pixel[2]),
    }
}

fn crop_origin(raw: &RawVideo, crop_box: Option<[u32; 4]>) -> Result<(usize, usize)> {
    match crop_box {
        Some([x0, y0, x1, y1]) => {
            let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
            if x1 - x0 != ROI_SIZE || y1 - y0 != ROI_SIZE {
                return Err(Error::InvalidArgument(format!(
                    "crop box [{x0}, {y0}, {x1}, {y1}] is not {ROI_SIZE}x{ROI_SIZE}"
                )));
            }
            if x1 > raw.width || y1 > raw.height {
                return Err(Error::InvalidArgument(format!(
                    "crop box [{x0}, {y0}, {x1}, {y1}] out of bounds for {}x{} frames",
                    raw.width, raw.height
                )));
            }
            Ok((x0, y0))
        }
        None => {
            if raw.width < ROI_SIZE || raw.height < ROI_SIZE {
                return Err(Error::InvalidArgument(format!(
                    "{}x{} frames are smaller than the mouth region",
                    raw.width, raw.height
                )));
            }
            Ok(((raw.width - ROI_SIZE) / 2, (raw.height - ROI_SIZE) / 2))
        }
    }
}

/// Grayscale mouth crop on a `[0, 1]` intensity scale, before standardization.
fn crop_gray(raw: &RawVideo, crop_box: Option<[u32; 4]>) -> Result<Vec<f64>> {
    let (x0, y0) = crop_origin(raw, crop_box)?;
    let c = raw.channels;
    let mut out = Vec::with_capacity(raw.frames * ROI_SIZE * ROI_SIZE);
    for t in 0..raw.frames {
        let frame = raw.frame(t);
        for y in y0..y0 + ROI_SIZE {
            for x in x0..x0 + ROI_SIZE {
                let at = (y * raw.width + x) * c;
                out.push(gray(&frame[at..at + c]) / 255.0);
            }
        }
    }
    Ok(out)
}

/// Crops the 96x96 mouth region, converts to grayscale and standardizes with
/// the corpus statistics.
pub fn preprocess_video(
    raw: &RawVideo,
    crop_box: Option<[u32; 4]>,
    stats: &PreprocessStats,
    source_id: &str,
) -> Result<VideoClip> {
    if raw.frames == 0 {
        return Err(Error::InvalidArgument(format!("`{source_id}` has no frames")));
    }
    let frames = crop_gray(raw, crop_box)?
        .into_iter()
        .map(|x| ((x - stats.mean) / stats.std) as f32)
        .collect();
    Ok(VideoClip {
        frames,
        len: raw.frames,
        height: ROI_SIZE,
        width: ROI_SIZE,
        source_id: source_id.to_string(),
    })
}

/// Mean and standard deviation of the cropped grayscale pixels of every clip
/// in the manifest.
pub fn compute_stats(manifest: &CorpusManifest) -> Result<PreprocessStats> {
    let (mut n, mut sum, mut sumsq) = (0usize, 0.0f64, 0.0f64);
    for r in &manifest.records {
        let raw = read_record_video(manifest, r)?;
        for x in crop_gray(&raw, r.crop_box)? {
            n += 1;
            sum += x;
            sumsq += x * x;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no pixels to compute statistics from".into()));
    }
    let mean = sum / n as f64;
    let var = (sumsq / n as f64 - mean * mean).max(0.0);
    PreprocessStats::new(mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentParams {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub fn sample<R: rand::Rng + ?Sized>(clip: &VideoClip, rng: &mut R) -> Self {
        AugmentParams {
            top: rng.random_range(0..=clip.height - CROP_SIZE),
            left: rng.random_range(0..=clip.width - CROP_SIZE),
            flip: rng.random_bool(0.5),
        }
    }

    pub fn center(clip: &VideoClip) -> Self {
        AugmentParams {
            top: (clip.height - CROP_SIZE) / 2,
            left: (clip.width - CROP_SIZE) / 2,
            flip: false,
        }
    }
}

/// Applies one crop offset and one flip decision to every frame.
pub fn augment_with(clip: &VideoClip, params: AugmentParams) -> VideoClip {
    let (h, w) = (clip.height, clip.width);
    assert!(params.top + CROP_SIZE <= h && params.left + CROP_SIZE <= w);
    let mut frames = Vec::with_capacity(clip.len * CROP_SIZE * CROP_SIZE);
    for t in 0..clip.len {
        let frame = clip.frame(t);
        for y in params.top..params.top + CROP_SIZE {
            let row = &frame[y * w + params.left..y * w + params.left + CROP_SIZE];
            if params.flip {
                frames.extend(row.iter().rev());
            } else {
                frames.extend_from_slice(row);
            }
        }
    }
    VideoClip {
        frames,
        len: clip.len,
        height: CROP_SIZE,
        width: CROP_SIZE,
        source_id: clip.source_id.clone(),
    }
}

/// Random 88x88 crop plus horizontal flip with probability 0.5, both shared
/// by all frames of the clip.
pub fn augment<R: rand::Rng + ?Sized>(clip: &VideoClip, rng: &mut R) -> VideoClip {
    let params = AugmentParams::sample(clip, rng);
    augment_with(clip, params)
}

/// Evaluation-time view: centered 88x88 crop, no flip.
pub fn center_crop(clip: &VideoClip) -> VideoClip {
    augment_with(clip, AugmentParams::center(clip))
}

/// Converts 16-bit audio to `[-1, 1)` floats and pads with zeros or truncates
/// to exactly `640 * frames` samples.
pub fn audio_clip(raw: &RawAudio, frames: usize, source_id: &str) -> AudioClip {
    let n = frames * SAMPLES_PER_FRAME;
    let mut samples: Vec<f32> = raw
        .samples
        .iter()
        .take(n)
        .map(|&s| f32::from(s) / 32768.0)
        .collect();
    samples.resize(n, 0.0);
    AudioClip {
        samples,
        source_id: source_id.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub modality: Modality,
    /// Sorted, deduplicated temporal indices (frames or samples).
    pub masked_indices: Vec<usize>,
    /// Number of frames (video) or samples (audio) in the clip.
    pub length: usize,
    pub span: usize,
}

impl MaskSpec {
    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    /// Dense per-index flags.
    pub fn flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.length];
        for &i in &self.masked_indices {
            flags[i] = true;
        }
        flags
    }

    pub fn empty(modality: Modality, length: usize) -> Self {
        MaskSpec {
            modality,
            masked_indices: Vec::new(),
            length,
            span: MASK_SPAN,
        }
    }
}

/// Union of `span`-frame runs starting at each of `starts`, clipped at the
/// end of the clip.
pub fn frame_mask_from_starts(len: usize, starts: &[usize], span: usize) -> MaskSpec {
    let mut flags = vec![false; len];
    for &s in starts {
        for f in flags.iter_mut().skip(s).take(span) {
            *f = true;
        }
    }
    MaskSpec {
        modality: Modality::Video,
        masked_indices: flags
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| i)
            .collect(),
        length: len,
        span,
    }
}

/// Each frame independently becomes a mask start with probability
/// `start_prob`; each start masks itself and the following `span - 1` frames.
pub fn sample_frame_mask<R: rand::Rng + ?Sized>(
    len: usize,
    start_prob: f64,
    span: usize,
    rng: &mut R,
) -> MaskSpec {
    let starts: Vec<usize> = (0..len)
        .filter(|_| rng.random::<f64>() < start_prob)
        .collect();
    frame_mask_from_starts(len, &starts, span)
}

/// Masks samples `[f * scale, (f + 1) * scale)` for every masked frame `f`.
pub fn derive_audio_mask(video_mask: &MaskSpec, scale: usize) -> Result<MaskSpec> {
    if video_mask.modality != Modality::Video {
        return Err(Error::InvalidArgument("audio masks derive from video masks".into()));
    }
    let masked_indices = video_mask
        .masked_indices
        .iter()
        .flat_map(|&f| f * scale..(f + 1) * scale)
        .collect();
    Ok(MaskSpec {
        modality: Modality::Audio,
        masked_indices,
        length: video_mask.length * scale,
        span: video_mask.span,
    })
}

/// Anything whose temporal positions can be zeroed by a [`MaskSpec`].
pub trait Maskable: Clone {
    const MODALITY: Modality;
    fn temporal_len(&self) -> usize;
    fn zero_at(&mut self, index: usize);
}

impl Maskable for VideoClip {
    const MODALITY: Modality = Modality::Video;

    fn temporal_len(&self) -> usize {
        self.len
    }

    fn zero_at(&mut self, index: usize) {
        let n = self.height * self.width;
        self.frames[index * n..(index + 1) * n].fill(0.0);
    }
}

impl Maskable for AudioClip {
    const MODALITY: Modality = Modality::Audio;

    fn temporal_len(&self) -> usize {
        self.samples.len()
    }

    fn zero_at(&mut self, index: usize) {
        self.samples[index] = 0.0;
    }
}

/// Zeroes the masked positions; every other value is left untouched.
pub fn apply_mask<C: Maskable>(clip: &C, mask: &MaskSpec) -> Result<C> {
    if mask.modality != C::MODALITY {
        return Err(Error::InvalidArgument(format!(
            "{:?} mask applied to a {:?} clip",
            mask.modality,
            C::MODALITY
        )));
    }
    let len = clip.temporal_len();
    if let Some(bad) = mask.masked_indices.iter().find(|&&i| i >= len) {
        return Err(Error::InvalidArgument(format!(
            "mask index {bad} out of bounds for length {len}"
        )));
    }
    let mut out = clip.clone();
    for &i in &mask.masked_indices {
        out.zero_at(i);
    }
    Ok(out)
}

/// Number of frames a record spans, at least one.
pub fn record_frames(record: &UtteranceRecord) -> usize {
    ((record.duration * VIDEO_FPS as f64).round() as usize).max(1)
}

fn read_record_video(manifest: &CorpusManifest, record: &UtteranceRecord) -> Result<RawVideo> {
    let raw = media::read_video(&manifest.resolve(&record.video_ref))?;
    let start = (record.offset_s * VIDEO_FPS as f64).round() as usize;
    if start == 0 && record_frames(record) >= raw.frames {
        return Ok(raw);
    }
    Ok(raw.slice_frames(start, record_frames(record)))
}

/// Loads, crops and standardizes a record's video and reads its audio,
/// aligned to exactly 640 samples per frame.
pub fn load_record(
    manifest: &CorpusManifest,
    record: &UtteranceRecord,
    stats: &PreprocessStats,
) -> Result<(VideoClip, AudioClip)> {
    let raw = read_record_video(manifest, record)?;
    let video = preprocess_video(&raw, record.crop_box, stats, &record.id)?;
    let audio_path = manifest.resolve(&record.audio_ref);
    let mut raw_audio = media::read_audio(&audio_path)?;
    if raw_audio.sample_rate != media::AUDIO_RATE {
        return Err(Error::media(
            audio_path,
            format!("sample rate {} Hz, expected {}", raw_audio.sample_rate, media::AUDIO_RATE),
        ));
    }
    let start = (record.offset_s * VIDEO_FPS as f64).round() as usize * SAMPLES_PER_FRAME;
    if start > 0 {
        raw_audio.samples = raw_audio.samples.into_iter().skip(start).collect();
    }
    let audio = audio_clip(&raw_audio, video.len, &record.id);
    Ok((video, audio))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn raw(frames: usize, size: usize, value: u8) -> RawVideo {
        RawVideo {
            frames,
            height: size,
            width: size,
            channels: 1,
            pixels: vec![value; frames * size * size],
        }
    }

    fn ramp_clip(len: usize) -> VideoClip {
        let n = ROI_SIZE * ROI_SIZE;
        VideoClip {
            frames: (0..len * n).map(|i| (i % 977) as f32 * 0.01).collect(),
            len,
            height: ROI_SIZE,
            width: ROI_SIZE,
            source_id: "r".into(),
        }
    }

    #[test]
    fn frames_at_mean_standardize_to_zero() {
        let stats = PreprocessStats::new(100.0 / 255.0, 0.2).unwrap();
        let clip = preprocess_video(&raw(2, 100, 100), None, &stats, "a").unwrap();
        assert_eq!((clip.height, clip.width, clip.len), (96, 96, 2));
        assert!(clip.frames.iter().all(|&x| x.abs() < 1e-6));
    }

    #[test]
    fn unit_stats_only_crop_and_gray() {
        let mut r = raw(1, 100, 0);
        r.pixels[2 * 100 + 2] = 255;
        let clip =
            preprocess_video(&r, Some([2, 2, 98, 98]), &PreprocessStats::default(), "a").unwrap();
        assert_eq!(clip.frames[0], 1.0);
        assert_eq!(clip.frames[1], 0.0);
    }

    #[test]
    fn mean_plus_std_maps_to_one() {
        let stats = PreprocessStats::new(51.0 / 255.0, 102.0 / 255.0).unwrap();
        let clip = preprocess_video(&raw(1, 96, 153), None, &stats, "a").unwrap();
        assert!(clip.frames.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn rgb_converts_to_luma() {
        let r = RawVideo {
            frames: 1,
            height: 96,
            width: 96,
            channels: 3,
            pixels: [255u8, 0, 0].repeat(96 * 96),
        };
        let clip = preprocess_video(&r, None, &PreprocessStats::default(), "a").unwrap();
        assert!((clip.frames[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn crop_box_out_of_bounds() {
        let err = preprocess_video(
            &raw(1, 100, 0),
            Some([10, 10, 106, 106]),
            &PreprocessStats::default(),
            "a",
        )
        .unwrap_err();
        assert!(err.to_string().contains("out of bounds"));
        assert!(preprocess_video(&raw(1, 100, 0), Some([0, 0, 90, 90]), &PreprocessStats::default(), "a").is_err());
    }

    #[test]
    fn standardization_round_trips() {
        let mut r = raw(2, 100, 0);
        for (i, p) in r.pixels.iter_mut().enumerate() {
            *p = (i * 31 % 256) as u8;
        }
        let stats = PreprocessStats::new(0.43, 0.21).unwrap();
        let clip = preprocess_video(&r, Some([3, 1, 99, 97]), &stats, "a").unwrap();
        let gray = crop_gray(&r, Some([3, 1, 99, 97])).unwrap();
        for (x, g) in clip.frames.iter().zip(gray) {
            assert!((f64::from(*x) * stats.std + stats.mean - g).abs() < 1e-6);
        }
    }

    #[test]
    fn flip_twice_recovers_crop() {
        let clip = ramp_clip(3);
        let p = AugmentParams {
            top: 5,
            left: 2,
            flip: true,
        };
        let once = augment_with(&clip, p);
        // flipping an 88-wide crop is its own inverse
        let mut twice = once.clone();
        for t in 0..twice.len {
            for y in 0..CROP_SIZE {
                let row = &mut twice.frames[(t * CROP_SIZE + y) * CROP_SIZE..][..CROP_SIZE];
                row.reverse();
            }
        }
        let plain = augment_with(&clip, AugmentParams { flip: false, ..p });
        assert_eq!(twice, plain);
    }

    #[test]
    fn augmentation_is_consistent_across_frames() {
        let clip = ramp_clip(5);
        let mut rng = seed::rng(3, "aug", &[]);
        for _ in 0..50 {
            let p = AugmentParams::sample(&clip, &mut rng);
            assert!(p.top <= 8 && p.left <= 8);
            let out = augment_with(&clip, p);
            assert_eq!((out.height, out.width), (88, 88));
            for t in 0..clip.len {
                let src = clip.frame(t);
                let dst = out.frame(t);
                for y in 0..CROP_SIZE {
                    for x in 0..CROP_SIZE {
                        let sx = if p.flip { p.left + CROP_SIZE - 1 - x } else { p.left + x };
                        assert_eq!(dst[y * CROP_SIZE + x], src[(p.top + y) * ROI_SIZE + sx]);
                    }
                }
            }
        }
    }

    #[test]
    fn flip_frequency_is_one_half() {
        let clip = ramp_clip(1);
        let mut rng = seed::rng(11, "flip", &[]);
        let flips = (0..10_000)
            .filter(|_| AugmentParams::sample(&clip, &mut rng).flip)
            .count();
        let freq = flips as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn union_of_spans() {
        let m = frame_mask_from_starts(10, &[2, 7], 3);
        assert_eq!(m.masked_indices, vec![2, 3, 4, 7, 8, 9]);
        let m = frame_mask_from_starts(10, &[8], 3);
        assert_eq!(m.masked_indices, vec![8, 9]);
    }

    #[test]
    fn zero_start_prob_masks_nothing() {
        let mut rng = seed::rng(1, "m", &[]);
        assert!(sample_frame_mask(50, 0.0, 3, &mut rng).is_empty());
    }

    #[test]
    fn interior_mask_probability() {
        let mut rng = seed::rng(5, "mask-stat", &[]);
        let draws = 100_000;
        let mut hits = 0;
        for _ in 0..draws {
            let m = sample_frame_mask(6, MASK_START_PROB, MASK_SPAN, &mut rng);
            if m.masked_indices.contains(&4) {
                hits += 1;
            }
        }
        let p = hits as f64 / draws as f64;
        assert!((p - 0.488).abs() <= 0.01, "{p}");
    }

    #[test]
    fn audio_mask_scales_frames() {
        let v = frame_mask_from_starts(10, &[2], 3);
        let a = derive_audio_mask(&v, 640).unwrap();
        assert_eq!(a.masked_indices.len(), 640 * 3);
        assert_eq!(a.masked_indices[0], 1280);
        assert_eq!(*a.masked_indices.last().unwrap(), 3199);
        assert_eq!(a.length, 6400);
        let e = derive_audio_mask(&MaskSpec::empty(Modality::Video, 4), 640).unwrap();
        assert!(e.is_empty());
        assert!(derive_audio_mask(&a, 640).is_err());
    }

    #[test]
    fn apply_mask_cases() {
        let clip = ramp_clip(3);
        assert_eq!(apply_mask(&clip, &MaskSpec::empty(Modality::Video, 3)).unwrap(), clip);
        let full = apply_mask(&clip, &frame_mask_from_starts(3, &[0], 3)).unwrap();
        assert!(full.frames.iter().all(|&x| x == 0.0));
        let first = apply_mask(&clip, &frame_mask_from_starts(3, &[0], 1)).unwrap();
        assert!(first.frame(0).iter().all(|&x| x == 0.0));
        assert_eq!(first.frame(1), clip.frame(1));
        let bad = MaskSpec {
            masked_indices: vec![3],
            ..MaskSpec::empty(Modality::Video, 3)
        };
        assert!(apply_mask(&clip, &bad).is_err());
        let audio = AudioClip {
            samples: vec![1.0; 10],
            source_id: "a".into(),
        };
        assert!(apply_mask(&audio, &bad).is_err());
    }

    #[test]
    fn audio_is_padded_or_trimmed() {
        let raw = RawAudio {
            sample_rate: 16_000,
            samples: vec![16384; 700],
        };
        let a = audio_clip(&raw, 2, "a");
        assert_eq!(a.samples.len(), 1280);
        assert_eq!(a.samples[699], 0.5);
        assert_eq!(a.samples[700], 0.0);
        assert_eq!(audio_clip(&raw, 1, "a").samples.len(), 640);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn mask_partition_and_alignment(len in 1usize..40, seed_v in 0u64..500, p in 0.0f64..1.0) {
                let mut rng = seed::rng(seed_v, "p", &[]);
                let vm = sample_frame_mask(len, p, MASK_SPAN, &mut rng);
                let am = derive_audio_mask(&vm, AUDIO_MASK_SCALE).unwrap();
                let mut back: Vec<usize> = am.masked_indices.iter().map(|i| i / AUDIO_MASK_SCALE).collect();
                back.dedup();
                prop_assert_eq!(&back, &vm.masked_indices);

                let audio = AudioClip {
                    samples: (0..len * AUDIO_MASK_SCALE).map(|i| 1.0 + i as f32).collect(),
                    source_id: "a".into(),
                };
                let masked = apply_mask(&audio, &am).unwrap();
                let flags = am.flags();
                for (i, (a, b)) in audio.samples.iter().zip(&masked.samples).enumerate() {
                    if flags[i] { prop_assert_eq!(*b, 0.0) } else { prop_assert_eq!(a.to_bits(), b.to_bits()) }
                }
            }
        }
    }
}
