//! Packed media containers.
//!
//! Video (`.avv`):
//!
//! ```text
//! magic    8 bytes  "AVSVID01"
//! frames   u32 LE
//! height   u32 LE
//! width    u32 LE
//! channels u32 LE   1 (grayscale) or 3 (RGB, interleaved)
//! pixels   frames * height * width * channels bytes, row-major
//! ```
//!
//! Audio (`.ava`):
//!
//! ```text
//! magic    8 bytes  "AVSAUD01"
//! rate     u32 LE   samples per second (16000)
//! samples  u32 LE
//! data     samples * i16 LE, mono
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const VIDEO_MAGIC: &[u8; 8] = b"AVSVID01";
pub const AUDIO_MAGIC: &[u8; 8] = b"AVSAUD01";

pub const VIDEO_FPS: usize = 25;
pub const AUDIO_RATE: usize = 16_000;
/// Audio samples per video frame.
pub const SAMPLES_PER_FRAME: usize = AUDIO_RATE / VIDEO_FPS;

#[derive(Debug, Clone, PartialEq)]
pub struct RawVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl RawVideo {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    /// Frames `[start, start + count)`, clamped to the clip.
    pub fn slice_frames(&self, start: usize, count: usize) -> RawVideo {
        let start = start.min(self.frames);
        let end = (start + count).min(self.frames);
        let n = self.frame_len();
        RawVideo {
            frames: end - start,
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels: self.pixels[start * n..end * n].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawAudio {
    pub sample_rate: usize,
    pub samples: Vec<i16>,
}

fn read_u32(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([buf[at], buf[at + 1], buf[at + 2], buf[at + 3]])
}

pub fn write_video(path: &Path, video: &RawVideo) -> Result<()> {
    if video.channels != 1 && video.channels != 3 {
        return Err(Error::media(path, "channels must be 1 or 3"));
    }
    if video.pixels.len() != video.frames * video.frame_len() {
        return Err(Error::media(path, "pixel buffer does not match header"));
    }
    let mut out = Vec::with_capacity(24 + video.pixels.len());
    out.extend_from_slice(VIDEO_MAGIC);
    for v in [video.frames, video.height, video.width, video.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&video.pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_video(path: &Path) -> Result<RawVideo> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 24 || &buf[..8] != VIDEO_MAGIC {
        return Err(Error::media(path, "missing AVSVID01 header"));
    }
    let frames = read_u32(&buf, 8) as usize;
    let height = read_u32(&buf, 12) as usize;
    let width = read_u32(&buf, 16) as usize;
    let channels = read_u32(&buf, 20) as usize;
    if channels != 1 && channels != 3 {
        return Err(Error::media(path, format!("unsupported channel count {channels}")));
    }
    let expected = frames * height * width * channels;
    if buf.len() - 24 != expected {
        return Err(Error::media(
            path,
            format!("expected {expected} pixel bytes, found {}", buf.len() - 24),
        ));
    }
    Ok(RawVideo {
        frames,
        height,
        width,
        channels,
        pixels: buf[24..].to_vec(),
    })
}

pub fn write_audio(path: &Path, audio: &RawAudio) -> Result<()> {
    let mut out = Vec::with_capacity(16 + 2 * audio.samples.len());
    out.extend_from_slice(AUDIO_MAGIC);
    out.extend_from_slice(&(audio.sample_rate as u32).to_le_bytes());
    out.extend_from_slice(&(audio.samples.len() as u32).to_le_bytes());
    for s in &audio.samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_audio(path: &Path) -> Result<RawAudio> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 || &buf[..8] != AUDIO_MAGIC {
        return Err(Error::media(path, "missing AVSAUD01 header"));
    }
    let sample_rate = read_u32(&buf, 8) as usize;
    let n = read_u32(&buf, 12) as usize;
    if buf.len() - 16 != 2 * n {
        return Err(Error::media(
            path,
            format!("expected {} sample bytes, found {}", 2 * n, buf.len() - 16),
        ));
    }
    let samples = buf[16..]
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    Ok(RawAudio {
        sample_rate,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn video_and_audio_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let video = RawVideo {
            frames: 2,
            height: 3,
            width: 4,
            channels: 1,
            pixels: (0..24).collect(),
        };
        let vpath = dir.path().join("a.avv");
        write_video(&vpath, &video).unwrap();
        assert_eq!(read_video(&vpath).unwrap(), video);

        let audio = RawAudio {
            sample_rate: AUDIO_RATE,
            samples: vec![-3, 0, 7, i16::MAX, i16::MIN],
        };
        let apath = dir.path().join("a.ava");
        write_audio(&apath, &audio).unwrap();
        assert_eq!(read_audio(&apath).unwrap(), audio);
    }

    #[test]
    fn truncated_video_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.avv");
        let mut bytes = VIDEO_MAGIC.to_vec();
        for v in [2u32, 3, 4, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&[0; 5]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_video(&path), Err(Error::Media { .. })));
    }

    #[test]
    fn slice_frames_clamps() {
        let video = RawVideo {
            frames: 3,
            height: 1,
            width: 1,
            channels: 1,
            pixels: vec![1, 2, 3],
        };
        assert_eq!(video.slice_frames(1, 10).pixels, vec![2, 3]);
        assert_eq!(video.slice_frames(5, 1).frames, 0);
    }
}
