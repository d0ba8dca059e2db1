//! Joint CTC/attention decoding and character error rates.

mod beam;
mod prefix;

use std::fs;
use std::path::Path;

use candle_core::Tensor;
use log::warn;
use serde::{Deserialize, Serialize};

pub use beam::{beam_search_core, combine, rank, AttentionScorer, BeamConfig, Hypothesis, SearchSpace};
pub use prefix::{ctc_full_logp, ctc_prefix_logp, PrefixState};

use crate::corpus::CorpusManifest;
use crate::datapipe::{self, PreprocessStats, VideoClip, CROP_SIZE};
use crate::error::{Error, Result};
use crate::finetune::{Tokenizer, TokenizerKind};
use crate::model::{to_rows, video_tensor, ModelWeights, VsrModel};

/// Unit-cost Levenshtein distance between two character sequences.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Text normalization applied to both sides before scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CerNormalization {
    /// Drop every whitespace character (Mandarin).
    pub strip_whitespace: bool,
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl CerNormalization {
    /// Trim only, except for Mandarin where all whitespace goes.
    pub fn for_language(language: &str) -> Self {
        CerNormalization { strip_whitespace: language == "zh", lowercase: false, strip_punctuation: false }
    }

    pub fn apply(&self, text: &str) -> Vec<char> {
        text.trim()
            .chars()
            .filter(|c| !(self.strip_whitespace && c.is_whitespace()))
            .filter(|c| !(self.strip_punctuation && c.is_ascii_punctuation()))
            .flat_map(|c| if self.lowercase { c.to_lowercase().collect::<Vec<_>>() } else { vec![c] })
            .collect()
    }
}

impl Default for CerNormalization {
    fn default() -> Self {
        CerNormalization { strip_whitespace: false, lowercase: false, strip_punctuation: false }
    }
}

/// Edits and reference length after normalization.
pub fn cer_counts(reference: &str, hypothesis: &str, norm: &CerNormalization) -> Result<(usize, usize)> {
    let r = norm.apply(reference);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok((edit_distance(&r, &norm.apply(hypothesis)), r.len()))
}

/// Character error rate with trim-only normalization.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let (e, n) = cer_counts(reference, hypothesis, &CerNormalization::default())?;
    Ok(e as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
    pub ref_len: usize,
    pub cer: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub model_fingerprint: String,
    pub language: String,
    pub beam: BeamConfig,
    pub normalization: CerNormalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CerReport {
    pub header: ReportHeader,
    pub per_utterance: Vec<UtteranceScore>,
    pub total_edits: usize,
    pub total_ref_len: usize,
    pub corpus_cer: f64,
}

impl CerReport {
    /// Sorts rows by id and fills in the totals.
    pub fn assemble(header: ReportHeader, mut rows: Vec<UtteranceScore>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let total_edits = rows.iter().map(|r| r.edits).sum();
        let total_ref_len: usize = rows.iter().map(|r| r.ref_len).sum();
        let corpus_cer = if total_ref_len > 0 { total_edits as f64 / total_ref_len as f64 } else { 0.0 };
        CerReport { header, per_utterance: rows, total_edits, total_ref_len, corpus_cer }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Attention scorer backed by the recognition decoder.
struct DecoderScorer<'a> {
    model: &'a VsrModel,
    weights: &'a ModelWeights,
    memory: &'a Tensor,
    sos: u32,
}

impl AttentionScorer for DecoderScorer<'_> {
    fn next_logp(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| std::iter::once(self.sos).chain(p.iter().copied()).collect())
            .collect();
        let lp = self.model.decoder.forward(self.weights, &inputs, self.memory)?;
        let l = lp.dim(1)?;
        to_rows(&lp.narrow(1, l - 1, 1)?.squeeze(1)?)
    }
}

fn max_len_for(cfg: &BeamConfig, tok: &Tokenizer, enc_len: usize, decoder_limit: usize) -> usize {
    let ratio = cfg.max_len_ratio.unwrap_or(match tok.kind {
        TokenizerKind::Subword => 1.0,
        TokenizerKind::Character => 0.5,
    });
    ((enc_len as f64 * ratio).round() as usize).clamp(1, decoder_limit.saturating_sub(1).max(1))
}

/// Decodes one preprocessed clip (88x88 frames, or 96x96 frames which are
/// center-cropped) and returns the hypotheses, best first.
pub fn beam_search(
    model: &VsrModel,
    weights: &ModelWeights,
    clip: &VideoClip,
    cfg: &BeamConfig,
    tok: &Tokenizer,
) -> Result<Vec<Hypothesis>> {
    let clip = if clip.height == CROP_SIZE && clip.width == CROP_SIZE {
        clip.clone()
    } else {
        datapipe::center_crop(clip)
    };
    let memory = model.encode(weights, &video_tensor(&clip)?)?;
    let ctc_lp = to_rows(&model.ctc.forward(weights, &memory)?)?;
    let candidates = tok.emittable();
    let space = SearchSpace {
        ctc_lp: &ctc_lp,
        blank: tok.blank() as usize,
        eos: tok.eos(),
        candidates: &candidates,
        max_len: max_len_for(cfg, tok, ctc_lp.len(), model.decoder.cfg.max_len),
    };
    let scorer = DecoderScorer { model, weights, memory: &memory, sos: tok.sos() };
    beam_search_core(&scorer, &space, cfg)
}

/// Transcript of the best finished hypothesis, or an empty string.
pub fn decode_clip(
    model: &VsrModel,
    weights: &ModelWeights,
    clip: &VideoClip,
    cfg: &BeamConfig,
    tok: &Tokenizer,
) -> Result<String> {
    let hyps = beam_search(model, weights, clip, cfg, tok)?;
    Ok(match hyps.first() {
        Some(h) => tok.decode(&h.tokens),
        None => {
            warn!("`{}`: no hypothesis finished; returning an empty transcript", clip.source_id);
            String::new()
        }
    })
}

/// Decodes every record and scores it against its transcript. A record
/// that fails to load or decode counts as fully wrong and is flagged.
pub fn evaluate(
    model: &VsrModel,
    weights: &ModelWeights,
    manifest: &CorpusManifest,
    stats: &PreprocessStats,
    cfg: &BeamConfig,
    tok: &Tokenizer,
    model_fingerprint: &str,
) -> Result<CerReport> {
    let norm = CerNormalization::for_language(&tok.language);
    let mut rows = Vec::with_capacity(manifest.len());
    for r in &manifest.records {
        let reference = r
            .transcript
            .clone()
            .ok_or_else(|| Error::InvalidRecord { id: r.id.clone(), msg: "no transcript to evaluate".into() })?;
        let decoded = datapipe::load_record(manifest, r, stats)
            .and_then(|(video, _)| decode_clip(model, weights, &video, cfg, tok));
        let (hypothesis, failed) = match decoded {
            Ok(h) => (h, false),
            Err(e) => {
                warn!("`{}`: decoding failed: {e}", r.id);
                (String::new(), true)
            }
        };
        let (mut edits, ref_len) = cer_counts(&reference, &hypothesis, &norm)?;
        if failed {
            edits = ref_len;
        }
        rows.push(UtteranceScore {
            id: r.id.clone(),
            reference,
            hypothesis,
            edits,
            ref_len,
            cer: edits as f64 / ref_len as f64,
            failed,
        });
    }
    let header = ReportHeader {
        model_fingerprint: model_fingerprint.to_string(),
        language: tok.language.clone(),
        beam: *cfg,
        normalization: norm,
    };
    Ok(CerReport::assemble(header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert!((cer("abc", "axc").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cer("ab", "").unwrap(), 1.0);
        assert!(matches!(cer("", "a"), Err(Error::EmptyReference)));
        assert!(matches!(cer("  ", "a"), Err(Error::EmptyReference)));
    }

    #[test]
    fn mandarin_ignores_spaces_latin_keeps_them() {
        let zh = CerNormalization::for_language("zh");
        assert_eq!(cer_counts("你好 世界", "你好世界", &zh).unwrap(), (0, 4));
        let es = CerNormalization::for_language("es");
        assert_eq!(cer_counts("ka lo", "kalo", &es).unwrap(), (1, 5));
    }

    #[test]
    fn report_totals() {
        let header = ReportHeader {
            model_fingerprint: "x".into(),
            language: "es".into(),
            beam: BeamConfig::default(),
            normalization: CerNormalization::default(),
        };
        let row = |id: &str, edits| UtteranceScore {
            id: id.into(),
            reference: "abc".into(),
            hypothesis: String::new(),
            edits,
            ref_len: 3,
            cer: edits as f64 / 3.0,
            failed: false,
        };
        let r = CerReport::assemble(header, vec![row("c", 0), row("a", 3), row("b", 0)]);
        assert_eq!(r.per_utterance[0].id, "a");
        assert_eq!(r.total_edits, 3);
        assert!((r.corpus_cer - 1.0 / 3.0).abs() < 1e-15);
    }
}
