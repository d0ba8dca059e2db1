//! Corpus manifests: ingestion, validation, long-utterance splitting,
//! language-hour accounting and the sampling protocols used to build
//! pre-training sets.

mod sampling;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub use sampling::{
    materialize, plan_exclude_language, plan_low_resource, plan_monolingual,
    plan_multilingual_all, plan_multilingual_mh, plan_multilingual_re, plan_pair, sample_hours,
    SamplingPlan, SamplingStrategy, FILL_LANGUAGE,
};
pub use synthetic::{generate_synthetic_corpus, synthetic_manifest_with_hours, SyntheticConfig};

/// Default upper bound for a single clip, in seconds.
pub const DEFAULT_MAX_DURATION_S: f64 = 24.0;

const FIELDS: [&str; 8] = [
    "id",
    "video",
    "audio",
    "duration_s",
    "lang",
    "text",
    "crop_box",
    "offset_s",
];

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

/// One audio-video(-text) clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    #[serde(rename = "video")]
    pub video_ref: String,
    #[serde(rename = "audio")]
    pub audio_ref: String,
    #[serde(rename = "duration_s")]
    pub duration: f64,
    #[serde(rename = "lang")]
    pub language: String,
    #[serde(rename = "text", default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<String>,
    /// `[x0, y0, x1, y1]` of the mouth region in raw-frame pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_box: Option<[u32; 4]>,
    /// Start of this clip inside the referenced media, in seconds. Set on
    /// segments produced by [`split_long_utterances`].
    #[serde(default, skip_serializing_if = "is_zero")]
    pub offset_s: f64,
}

impl UtteranceRecord {
    pub fn hours(&self) -> f64 {
        self.duration / 3600.0
    }

    pub fn is_labelled(&self) -> bool {
        self.transcript.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: &str| Error::InvalidRecord {
            id: self.id.clone(),
            msg: msg.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("empty id"));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(invalid("nonpositive duration"));
        }
        if !is_language_code(&self.language) {
            return Err(invalid("language must be a two-letter lowercase code"));
        }
        if !(self.offset_s.is_finite() && self.offset_s >= 0.0) {
            return Err(invalid("negative offset"));
        }
        if let Some([x0, y0, x1, y1]) = self.crop_box {
            if x1 <= x0 || y1 <= y0 {
                return Err(invalid("crop box is empty"));
            }
        }
        Ok(())
    }
}

pub fn is_language_code(code: &str) -> bool {
    code.len() == 2 && code.bytes().all(|b| b.is_ascii_lowercase())
}

/// An ordered list of records plus the directory media references are
/// resolved against.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub name: String,
    pub records: Vec<UtteranceRecord>,
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(name: impl Into<String>, records: Vec<UtteranceRecord>) -> Result<Self> {
        let manifest = CorpusManifest {
            name: name.into(),
            records,
            base_dir: PathBuf::from("."),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            r.validate()?;
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
        }
        Ok(())
    }

    /// Rejects records whose language is not in `languages`.
    pub fn validate_languages(&self, languages: &[String]) -> Result<()> {
        for r in &self.records {
            if !languages.iter().any(|l| l == &r.language) {
                return Err(Error::InvalidRecord {
                    id: r.id.clone(),
                    msg: format!("language `{}` not in the configured set", r.language),
                });
            }
        }
        Ok(())
    }

    pub fn total_hours(&self) -> f64 {
        self.records.iter().map(UtteranceRecord::hours).sum()
    }

    pub fn languages(&self) -> Vec<String> {
        hours_by_language(self).into_keys().collect()
    }

    pub fn max_clip_hours(&self) -> f64 {
        self.records
            .iter()
            .map(UtteranceRecord::hours)
            .fold(0.0, f64::max)
    }

    pub fn resolve(&self, reference: &str) -> PathBuf {
        self.base_dir.join(reference)
    }

    /// New manifest over a subset of records, sharing the media root.
    pub fn derive(&self, name: impl Into<String>, records: Vec<UtteranceRecord>) -> Self {
        CorpusManifest {
            name: name.into(),
            records,
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn filter_language(&self, language: &str) -> Self {
        let records = self
            .records
            .iter()
            .filter(|r| r.language == language)
            .cloned()
            .collect();
        self.derive(format!("{}-{}", self.name, language), records)
    }

    /// Serializes one record per line with media references rewritten
    /// relative to `dir`.
    pub fn to_jsonl(&self, dir: &Path) -> Result<String> {
        let base = absolutize(&self.base_dir);
        let dir = absolutize(dir);
        let mut out = String::new();
        for r in &self.records {
            let mut r = r.clone();
            r.video_ref = relative_ref(&base, &dir, &r.video_ref);
            r.audio_ref = relative_ref(&base, &dir, &r.audio_ref);
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or(Path::new("."));
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = self.to_jsonl(dir)?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn absolutize(p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()
            .map(|cwd| cwd.join(p))
            .unwrap_or_else(|_| p.to_path_buf())
    }
}

fn relative_ref(base: &Path, dir: &Path, reference: &str) -> String {
    let resolved = normalize(&base.join(reference));
    match pathdiff::diff_paths(&resolved, normalize(dir)) {
        Some(rel) => rel.to_string_lossy().into_owned(),
        None => resolved.to_string_lossy().into_owned(),
    }
}

fn normalize(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

/// Parses a line-delimited manifest. Every line must be a well-formed record;
/// blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let base_dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record(path, lineno, line)?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::ManifestParse {
                path: path.to_path_buf(),
                line: lineno,
                field: "id".into(),
                msg: format!("duplicate record id `{}`", record.id),
            });
        }
        records.push(record);
    }
    Ok(CorpusManifest {
        name,
        records,
        base_dir,
    })
}

fn parse_record(path: &Path, line: usize, text: &str) -> Result<UtteranceRecord> {
    let err = |field: &str, msg: String| Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        field: field.to_string(),
        msg,
    };
    let value: Value =
        serde_json::from_str(text).map_err(|e| err("<record>", format!("invalid JSON: {e}")))?;
    let Value::Object(obj) = value else {
        return Err(err("<record>", "expected a JSON object".into()));
    };
    if let Some(unknown) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(err(unknown, "unknown field".into()));
    }

    let string = |obj: &Map<String, Value>, field: &str| -> Result<String> {
        match obj.get(field) {
            Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
            Some(Value::String(_)) => Err(err(field, "empty string".into())),
            Some(_) => Err(err(field, "expected a string".into())),
            None => Err(err(field, "missing".into())),
        }
    };

    let id = string(&obj, "id")?;
    let video_ref = string(&obj, "video")?;
    let audio_ref = string(&obj, "audio")?;
    let language = string(&obj, "lang")?;
    if !is_language_code(&language) {
        return Err(err("lang", format!("`{language}` is not a two-letter code")));
    }
    let duration = obj
        .get("duration_s")
        .ok_or_else(|| err("duration_s", "missing".into()))?
        .as_f64()
        .ok_or_else(|| err("duration_s", "expected a number".into()))?;
    if !(duration.is_finite() && duration > 0.0) {
        return Err(err("duration_s", "nonpositive duration".into()));
    }
    let transcript = match obj.get("text") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(err("text", "expected a string".into())),
    };
    let crop_box = match obj.get("crop_box") {
        None | Some(Value::Null) => None,
        Some(Value::Array(items)) if items.len() == 4 => {
            let mut b = [0u32; 4];
            for (slot, item) in b.iter_mut().zip(items) {
                *slot = item
                    .as_u64()
                    .and_then(|v| u32::try_from(v).ok())
                    .ok_or_else(|| err("crop_box", "expected nonnegative integers".into()))?;
            }
            if b[2] <= b[0] || b[3] <= b[1] {
                return Err(err("crop_box", "empty box".into()));
            }
            Some(b)
        }
        Some(_) => return Err(err("crop_box", "expected 4 integers".into())),
    };
    let offset_s = match obj.get("offset_s") {
        None => 0.0,
        Some(v) => v
            .as_f64()
            .filter(|o| o.is_finite() && *o >= 0.0)
            .ok_or_else(|| err("offset_s", "expected a nonnegative number".into()))?,
    };
    Ok(UtteranceRecord {
        id,
        video_ref,
        audio_ref,
        duration,
        language,
        transcript,
        crop_box,
        offset_s,
    })
}

/// Total hours per language.
pub fn hours_by_language(manifest: &CorpusManifest) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for r in &manifest.records {
        *out.entry(r.language.clone()).or_insert(0.0) += r.hours();
    }
    out
}

/// Splits every record longer than `max_duration` seconds into
/// `ceil(d / max_duration)` equal segments. Segments are not aligned to the
/// transcript, so they are emitted unlabelled.
pub fn split_long_utterances(manifest: &CorpusManifest, max_duration: f64) -> CorpusManifest {
    assert!(max_duration > 0.0, "max_duration must be positive");
    let mut records = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        if r.duration <= max_duration {
            records.push(r.clone());
            continue;
        }
        let pieces = (r.duration / max_duration).ceil() as usize;
        let seg = r.duration / pieces as f64;
        for i in 0..pieces {
            let mut s = r.clone();
            s.id = format!("{}.seg{i}", r.id);
            s.duration = seg;
            s.offset_s = r.offset_s + seg * i as f64;
            s.transcript = None;
            records.push(s);
        }
    }
    manifest.derive(manifest.name.clone(), records)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(id: &str, lang: &str, duration: f64) -> UtteranceRecord {
        UtteranceRecord {
            id: id.into(),
            video_ref: format!("{id}.avv"),
            audio_ref: format!("{id}.ava"),
            duration,
            language: lang.into(),
            transcript: Some("ba ko".into()),
            crop_box: None,
            offset_s: 0.0,
        }
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_well_formed_file() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"id":"a","video":"a.avv","audio":"a.ava","duration_s":1.5,"lang":"en","text":"hi"}
{"id":"b","video":"b.avv","audio":"b.ava","duration_s":2.0,"lang":"es","crop_box":[0,0,96,96]}
{"id":"c","video":"c.avv","audio":"c.ava","duration_s":3.0,"lang":"zh","text":null}
"#;
        let path = write(dir.path(), "m.jsonl", text);
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.name, "m");
        assert_eq!(m.records[1].crop_box, Some([0, 0, 96, 96]));
        assert!(m.records[0].is_labelled());
        assert!(!m.records[2].is_labelled());
        assert_eq!(m.resolve("a.avv"), dir.path().join("a.avv"));
    }

    #[test]
    fn duplicate_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"id":"dup","video":"a","audio":"a","duration_s":1,"lang":"en"}"#;
        let path = write(dir.path(), "m.jsonl", &format!("{line}\n{line}\n"));
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dup"), "{msg}");
        assert!(msg.contains(":2:"), "{msg}");
    }

    #[test]
    fn negative_duration_is_rejected_with_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let text = r#"{"id":"a","video":"a","audio":"a","duration_s":1,"lang":"en"}
{"id":"b","video":"b","audio":"b","duration_s":-1,"lang":"en"}
"#;
        let path = write(dir.path(), "m.jsonl", text);
        let err = load_manifest(&path).unwrap_err();
        match &err {
            Error::ManifestParse {
                line, field, msg, ..
            } => {
                assert_eq!(*line, 2);
                assert_eq!(field, "duration_s");
                assert_eq!(msg, "nonpositive duration");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        for (bad, field) in [
            (r#"{"id":"a","video":"a","audio":"a","duration_s":1,"lang":"eng"}"#, "lang"),
            (r#"{"id":"a","video":"a","audio":"a","duration_s":"1","lang":"en"}"#, "duration_s"),
            (r#"{"id":"a","audio":"a","duration_s":1,"lang":"en"}"#, "video"),
            (r#"{"id":"a","video":"a","audio":"a","duration_s":1,"lang":"en","crop_box":[1,2,3]}"#, "crop_box"),
            (r#"{"id":"a","video":"a","audio":"a","duration_s":1,"lang":"en","speaker":"x"}"#, "speaker"),
            ("not json", "<record>"),
        ] {
            let path = write(dir.path(), "m.jsonl", bad);
            match load_manifest(&path).unwrap_err() {
                Error::ManifestParse { field: f, line, .. } => {
                    assert_eq!(f, field);
                    assert_eq!(line, 1);
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rec("x", "fr", 2.5);
        r.crop_box = Some([4, 4, 100, 100]);
        let m = CorpusManifest::new("m", vec![r, rec("y", "it", 1.0)])
            .unwrap()
            .with_base_dir(dir.path());
        let path = dir.path().join("out.jsonl");
        m.save(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.records, m.records);
    }

    #[test]
    fn save_rewrites_refs_relative_to_target() {
        let dir = tempfile::tempdir().unwrap();
        let m = CorpusManifest::new("m", vec![rec("x", "fr", 2.5)])
            .unwrap()
            .with_base_dir(dir.path().join("corpus"));
        let path = dir.path().join("runs").join("sampled.jsonl");
        m.save(&path).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back.records[0].video_ref, "../corpus/x.avv");
        assert_eq!(
            normalize(&back.resolve(&back.records[0].video_ref)),
            dir.path().join("corpus").join("x.avv")
        );
    }

    #[test]
    fn hours_by_language_sums_durations() {
        let m = CorpusManifest::new("m", vec![rec("a", "en", 1800.0), rec("b", "en", 1800.0)])
            .unwrap();
        let h = hours_by_language(&m);
        assert_eq!(h.len(), 1);
        assert!((h["en"] - 1.0).abs() < 1e-12);

        let empty = CorpusManifest::new("e", vec![]).unwrap();
        assert!(hours_by_language(&empty).is_empty());
    }

    #[test]
    fn split_30s_into_two_equal_segments() {
        let m = CorpusManifest::new("m", vec![rec("a", "en", 30.0)]).unwrap();
        let s = split_long_utterances(&m, 24.0);
        assert_eq!(s.len(), 2);
        assert_eq!(s.records[0].duration, 15.0);
        assert_eq!(s.records[1].duration, 15.0);
        assert_eq!(s.records[0].id, "a.seg0");
        assert_eq!(s.records[1].offset_s, 15.0);
        assert!(s.records.iter().all(|r| r.transcript.is_none()));
    }

    #[test]
    fn split_leaves_short_records_alone() {
        let m = CorpusManifest::new("m", vec![rec("a", "en", 20.0)]).unwrap();
        let s = split_long_utterances(&m, 24.0);
        assert_eq!(s.records, m.records);
    }

    #[test]
    fn split_50s_into_three() {
        let m = CorpusManifest::new("m", vec![rec("a", "en", 50.0)]).unwrap();
        let s = split_long_utterances(&m, 24.0);
        assert_eq!(s.len(), 3);
        for r in &s.records {
            assert!((r.duration - 50.0 / 3.0).abs() < 1e-12);
            assert!(r.duration <= 24.0);
        }
        let total: f64 = s.records.iter().map(|r| r.duration).sum();
        assert!((total - 50.0).abs() < 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_conserves_duration(durs in proptest::collection::vec(0.01f64..200.0, 1..20),
                                        max in 0.5f64..30.0) {
                let records = durs.iter().enumerate()
                    .map(|(i, d)| rec(&format!("r{i}"), "en", *d)).collect();
                let m = CorpusManifest::new("m", records).unwrap();
                let s = split_long_utterances(&m, max);
                prop_assert!((s.total_hours() - m.total_hours()).abs() < 1e-6);
                for r in &s.records {
                    prop_assert!(r.duration <= max + 1e-12);
                }
                prop_assert!(s.validate().is_ok());
            }
        }
    }
}
