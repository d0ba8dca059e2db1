//! Deterministic synthetic audio-visual corpus.
//!
//! Every utterance is a sequence of latent tokens drawn from a per-language
//! inventory. A token is rendered redundantly in both streams: as a mouth
//! shape in the video (25 frames/s) and as a two-tone chord in the audio
//! (16 kHz, 640 samples per frame). Transcripts spell the token sequence, so
//! lip reading, audio recognition and cross-modal prediction are all
//! learnable at toy scale.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{CorpusManifest, UtteranceRecord};
use crate::error::{Error, Result};
use crate::media::{self, RawAudio, RawVideo, AUDIO_RATE, SAMPLES_PER_FRAME, VIDEO_FPS};
use crate::seed;

/// Syllables for Latin-script languages; index = shared latent token id.
const SYLLABLES: [&str; 16] = [
    "ba", "ko", "mi", "tu", "se", "ra", "lo", "pe", "di", "nu", "ga", "fi", "vo", "ze", "hu", "ja",
];
/// Characters used for `zh`; same latent ids as [`SYLLABLES`].
const HANZI: [&str; 16] = [
    "大", "小", "山", "水", "日", "月", "木", "火", "土", "金", "人", "口", "手", "心", "天", "田",
];
const INVENTORY_SIZE: usize = 6;
/// Side of the mouth region the crop box selects.
pub const ROI_SIZE: usize = 96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_utterances: usize,
    pub languages: Vec<String>,
    /// Durations are drawn from the half-open interval `(lo, hi]` seconds.
    pub duration_range: (f64, f64),
    pub seed: u64,
    pub frames_per_token: usize,
    /// Side of the raw square frame; the mouth crop lands at a random offset.
    pub raw_size: usize,
    /// Uniform pixel noise amplitude (0-255 scale).
    pub pixel_noise: f64,
}

impl SyntheticConfig {
    pub fn new(
        n_utterances: usize,
        languages: Vec<String>,
        duration_range: (f64, f64),
        seed: u64,
    ) -> Self {
        SyntheticConfig {
            n_utterances,
            languages,
            duration_range,
            seed,
            frames_per_token: 4,
            raw_size: 104,
            pixel_noise: 6.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 {
            return Err(Error::InvalidArgument("n_utterances must be at least 1".into()));
        }
        if self.languages.is_empty() {
            return Err(Error::InvalidArgument("no languages given".into()));
        }
        if let Some(l) = self.languages.iter().find(|l| !super::is_language_code(l)) {
            return Err(Error::InvalidArgument(format!("bad language code `{l}`")));
        }
        let (lo, hi) = self.duration_range;
        if !(lo >= 0.0 && hi > lo && ((hi * VIDEO_FPS as f64).floor() as usize) >= 1) {
            return Err(Error::InvalidArgument(format!(
                "duration range ({lo}, {hi}] holds no whole frame"
            )));
        }
        if self.raw_size < ROI_SIZE || self.frames_per_token == 0 {
            return Err(Error::InvalidArgument("raw frames must hold the 96x96 mouth region".into()));
        }
        Ok(())
    }
}

/// The token ids a language draws from. Depends only on the language code,
/// so a language looks the same in every generated corpus.
pub fn language_inventory(language: &str) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut ids: Vec<usize> = (0..SYLLABLES.len()).collect();
    ids.shuffle(&mut seed::rng_for_id(0, "inventory", language));
    let mut inv: Vec<usize> = ids.into_iter().take(INVENTORY_SIZE).collect();
    inv.sort_unstable();
    inv
}

pub fn token_text(language: &str, token: usize) -> &'static str {
    if language == "zh" {
        HANZI[token]
    } else {
        SYLLABLES[token]
    }
}

pub fn transcript(language: &str, tokens: &[usize]) -> String {
    let parts: Vec<&str> = tokens.iter().map(|&t| token_text(language, t)).collect();
    if language == "zh" {
        parts.concat()
    } else {
        parts.join(" ")
    }
}

/// One planned utterance before any media is rendered.
#[derive(Debug, Clone)]
struct Planned {
    record: UtteranceRecord,
    tokens: Vec<usize>,
    frames: usize,
    crop_origin: (usize, usize),
}

fn plan_utterances(cfg: &SyntheticConfig) -> Vec<Planned> {
    let (lo, hi) = cfg.duration_range;
    let min_frames = ((lo * VIDEO_FPS as f64).floor() as usize + 1).max(1);
    let max_frames = ((hi * VIDEO_FPS as f64).floor() as usize).max(min_frames);
    (0..cfg.n_utterances)
        .map(|i| {
            let language = cfg.languages[i % cfg.languages.len()].clone();
            let id = format!("{language}{i:05}");
            let mut rng = seed::rng(cfg.seed, "utterance", &[i as u64]);
            let frames = rng.random_range(min_frames..=max_frames);
            let n_tokens = frames.div_ceil(cfg.frames_per_token);
            let inv = language_inventory(&language);
            let mut tokens: Vec<usize> = Vec::with_capacity(n_tokens);
            while tokens.len() < n_tokens {
                let t = inv[rng.random_range(0..inv.len())];
                if tokens.last() != Some(&t) {
                    tokens.push(t);
                }
            }
            let slack = cfg.raw_size - ROI_SIZE;
            let crop_origin = (rng.random_range(0..=slack), rng.random_range(0..=slack));
            let (x0, y0) = crop_origin;
            let record = UtteranceRecord {
                id: id.clone(),
                video_ref: format!("media/{id}.avv"),
                audio_ref: format!("media/{id}.ava"),
                duration: frames as f64 / VIDEO_FPS as f64,
                language: language.clone(),
                transcript: Some(transcript(&language, &tokens)),
                crop_box: Some([
                    x0 as u32,
                    y0 as u32,
                    (x0 + ROI_SIZE) as u32,
                    (y0 + ROI_SIZE) as u32,
                ]),
                offset_s: 0.0,
            };
            Planned {
                record,
                tokens,
                frames,
                crop_origin,
            }
        })
        .collect()
}

/// Mouth ellipse semi-axes for a token.
fn mouth_shape(token: usize) -> (f64, f64) {
    let width = 12.0 + 6.0 * (token % 4) as f64;
    let height = 4.0 + 5.0 * (token / 4) as f64;
    (width, height)
}

fn render_video(cfg: &SyntheticConfig, p: &Planned) -> RawVideo {
    let size = cfg.raw_size;
    let mut rng = seed::rng_for_id(cfg.seed, "pixels", &p.record.id);
    let mut pixels = Vec::with_capacity(p.frames * size * size);
    let cx = (p.crop_origin.0 + ROI_SIZE / 2) as f64;
    let cy = (p.crop_origin.1 + ROI_SIZE * 5 / 8) as f64;
    for f in 0..p.frames {
        let token = p.tokens[f / cfg.frames_per_token];
        let phase = (f % cfg.frames_per_token) as f64 + 0.5;
        let open = 0.6 + 0.4 * (PI * phase / cfg.frames_per_token as f64).sin();
        let (a, b) = mouth_shape(token);
        let (a, b) = (a, b * open);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 - cx) / a;
                let dy = (y as f64 - cy) / b.max(1.0);
                let r = dx * dx + dy * dy;
                let base = if r <= 1.0 {
                    40.0
                } else if r <= 1.8 {
                    95.0
                } else {
                    130.0 + 50.0 * y as f64 / size as f64
                };
                let noise = if cfg.pixel_noise > 0.0 {
                    rng.random_range(-cfg.pixel_noise..=cfg.pixel_noise)
                } else {
                    0.0
                };
                pixels.push((base + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawVideo {
        frames: p.frames,
        height: size,
        width: size,
        channels: 1,
        pixels,
    }
}

fn render_audio(cfg: &SyntheticConfig, p: &Planned) -> RawAudio {
    let mut rng = seed::rng_for_id(cfg.seed, "samples", &p.record.id);
    let n = p.frames * SAMPLES_PER_FRAME;
    let token_len = cfg.frames_per_token * SAMPLES_PER_FRAME;
    let samples = (0..n)
        .map(|i| {
            let token = p.tokens[i / token_len];
            let u = (i % token_len) as f64 / token_len as f64;
            let env = (PI * (u * 0.9 + 0.05)).sin();
            let t = i as f64 / AUDIO_RATE as f64;
            let f1 = 150.0 + 25.0 * token as f64;
            let f2 = 700.0 + 90.0 * token as f64;
            let x = env * (0.35 * (2.0 * PI * f1 * t).sin() + 0.25 * (2.0 * PI * f2 * t).sin())
                + rng.random_range(-0.005..=0.005);
            (x * 32767.0).round().clamp(-32768.0, 32767.0) as i16
        })
        .collect();
    RawAudio {
        sample_rate: AUDIO_RATE,
        samples,
    }
}

/// Writes `manifest.jsonl` plus one video and one audio file per utterance
/// under `out_dir/media`. The output is a pure function of `cfg`.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let media_dir = out_dir.join("media");
    fs::create_dir_all(&media_dir).map_err(|e| Error::io(&media_dir, e))?;
    let planned = plan_utterances(cfg);
    for p in &planned {
        media::write_video(&out_dir.join(&p.record.video_ref), &render_video(cfg, p))?;
        media::write_audio(&out_dir.join(&p.record.audio_ref), &render_audio(cfg, p))?;
    }
    let manifest = CorpusManifest {
        name: "synthetic".into(),
        records: planned.into_iter().map(|p| p.record).collect(),
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Manifest-only corpus whose per-language hours hit `hours` exactly: clips
/// are drawn from `clip_range` seconds and each language's last clip takes the
/// remainder. No media is written; useful for exercising sampling protocols
/// at proportions too large to render.
pub fn synthetic_manifest_with_hours(
    hours: &BTreeMap<String, f64>,
    clip_range: (f64, f64),
    seed: u64,
) -> Result<CorpusManifest> {
    let (lo, hi) = clip_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidArgument("clip range must be positive".into()));
    }
    let mut records = Vec::new();
    for (language, &h) in hours {
        let mut rng = seed::rng_for_id(seed, "hours", language);
        let mut remaining = h * 3600.0;
        let mut i = 0;
        while remaining > 1e-9 {
            let mut d = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            if remaining <= hi {
                d = remaining;
            } else if remaining - d < lo {
                // leave room for one more clip of at least `lo`
                d = remaining - lo;
            }
            let id = format!("{language}{i:06}");
            records.push(UtteranceRecord {
                video_ref: format!("media/{id}.avv"),
                audio_ref: format!("media/{id}.ava"),
                id,
                duration: d,
                language: language.clone(),
                transcript: None,
                crop_box: None,
                offset_s: 0.0,
            });
            remaining -= d;
            i += 1;
        }
    }
    CorpusManifest::new("synthetic-hours", records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{hours_by_language, load_manifest, split_long_utterances};

    fn langs(codes: &[&str]) -> Vec<String> {
        codes.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(10, langs(&["en", "es"]), (0.3, 0.6), 7);
        generate_synthetic_corpus(&cfg, a.path()).unwrap();
        generate_synthetic_corpus(&cfg, b.path()).unwrap();
        let ma = fs::read(a.path().join("manifest.jsonl")).unwrap();
        let mb = fs::read(b.path().join("manifest.jsonl")).unwrap();
        assert_eq!(ma, mb);
        let m = load_manifest(&a.path().join("manifest.jsonl")).unwrap();
        for r in &m.records {
            for reference in [&r.video_ref, &r.audio_ref] {
                assert_eq!(
                    fs::read(a.path().join(reference)).unwrap(),
                    fs::read(b.path().join(reference)).unwrap()
                );
            }
        }
    }

    #[test]
    fn languages_become_manifest_keys() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(10, langs(&["aa", "bb"]), (0.2, 0.4), 1);
        let m = generate_synthetic_corpus(&cfg, dir.path()).unwrap();
        let keys: Vec<String> = hours_by_language(&m).into_keys().collect();
        assert_eq!(keys, langs(&["aa", "bb"]));
    }

    #[test]
    fn long_durations_split_under_cap() {
        let cfg = SyntheticConfig::new(6, langs(&["en"]), (24.0, 30.0), 3);
        let planned = plan_utterances(&cfg);
        let m = CorpusManifest::new("m", planned.into_iter().map(|p| p.record).collect()).unwrap();
        assert!(m.records.iter().all(|r| r.duration > 24.0 && r.duration <= 30.0));
        let s = split_long_utterances(&m, 24.0);
        assert!(s.records.iter().all(|r| r.duration <= 24.0));
    }

    #[test]
    fn media_matches_durations() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(3, langs(&["zh"]), (0.2, 0.5), 11);
        let m = generate_synthetic_corpus(&cfg, dir.path()).unwrap();
        for r in &m.records {
            let v = media::read_video(&m.resolve(&r.video_ref)).unwrap();
            let a = media::read_audio(&m.resolve(&r.audio_ref)).unwrap();
            assert_eq!(v.frames as f64 / 25.0, r.duration);
            assert_eq!(a.samples.len(), v.frames * SAMPLES_PER_FRAME);
            let text = r.transcript.as_deref().unwrap();
            assert!(!text.contains(' '));
            assert_eq!(text.chars().count(), v.frames.div_ceil(4));
        }
    }

    #[test]
    fn zero_utterances_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig::new(0, langs(&["en"]), (0.2, 0.5), 11);
        assert!(generate_synthetic_corpus(&cfg, dir.path()).is_err());
    }

    #[test]
    fn hour_targets_are_hit() {
        let target = BTreeMap::from([("en".to_string(), 0.05), ("pt".to_string(), 0.0123)]);
        let m = synthetic_manifest_with_hours(&target, (2.0, 6.0), 4).unwrap();
        let h = hours_by_language(&m);
        assert!((h["en"] - 0.05).abs() < 1e-9);
        assert!((h["pt"] - 0.0123).abs() < 1e-9);
        assert!(m.records.iter().all(|r| r.duration <= 6.0 + 1e-9));
    }

    #[test]
    fn inventories_are_stable() {
        assert_eq!(language_inventory("es"), language_inventory("es"));
        assert_eq!(language_inventory("es").len(), INVENTORY_SIZE);
    }
}
