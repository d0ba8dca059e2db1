//! Experiment presets that chain sampling, pre-training, fine-tuning and
//! evaluation into comparable runs, and the tables that compare them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{
    self, hours_by_language, materialize, plan_exclude_language, plan_low_resource, plan_monolingual,
    plan_multilingual_all, plan_multilingual_mh, plan_multilingual_re, plan_pair, CorpusManifest, SamplingPlan,
    FILL_LANGUAGE,
};
use crate::datapipe::{self, PreprocessStats};
use crate::decode::{self, BeamConfig};
use crate::error::{Error, Result};
use crate::finetune::{self, EncoderInit, FinetuneConfig, FinetuneOptions, Tokenizer};
use crate::pretrain::{self, PretrainConfig, RunOptions};
use crate::seed;

/// Factor from paper-scale hours to the desk-scale defaults.
pub const DESK_HOURS_SCALE: f64 = 1e-3;
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), "-", env!("CARGO_PKG_VERSION"));

/// Which pre-training set each target language gets. Hour fields left
/// empty take the protocol's natural total from the training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Protocol {
    /// Pre-train on the target language alone.
    Monolingual { hours: Option<f64> },
    /// Pre-train on English alone, fine-tune on every language.
    EnglishOnly { hours: Option<f64> },
    MultilingualAll,
    /// Non-English languages in full, English filling up to `total_hours`
    /// (default: all English hours).
    MultilingualRe { total_hours: Option<f64> },
    /// Equal shares of every language adding up to `total_hours` (default:
    /// the target language's hours).
    MultilingualMh { total_hours: Option<f64> },
    LowResourceMonolingual { hours: f64 },
    LowResourceMultilingual { hours: f64 },
    /// The target language plus `added_hours` (default: all) of another.
    Pair { added: String, added_hours: Option<f64> },
    /// Everything except the target language, English filling up to
    /// `total_hours` (default: all English hours).
    LeaveOneOut { total_hours: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub protocol: Protocol,
    /// Fine-tuning and evaluation languages.
    pub languages: Vec<String>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub beam: BeamConfig,
    /// Fraction of each language's labelled clips held out for testing.
    pub test_fraction: f64,
    /// Seed of the test split. Kept apart from the run seed so that runs
    /// with different seeds share a test set.
    pub split_seed: u64,
}

impl ExperimentPreset {
    fn with(name: &str, protocol: Protocol, languages: Vec<String>) -> Self {
        let mut ft = FinetuneConfig::desk();
        ft.heldout_fraction = 0.0;
        ExperimentPreset {
            name: name.to_string(),
            protocol,
            languages,
            pretrain: PretrainConfig::desk(),
            beam: ft.beam,
            finetune: ft,
            test_fraction: 0.2,
            split_seed: 0,
        }
    }

    /// Preset by name. `languages` are the evaluation languages for presets
    /// that cover several.
    ///
    /// Names: `monolingual`, `monolingual-<lang>`, `english-only`,
    /// `multilingual-all`, `multilingual-re`, `multilingual-mh`,
    /// `low-resource-mono`, `low-resource-multi`, `pair-<base>-<added>`,
    /// `leave-one-out`, `leave-one-out-<lang>`.
    pub fn named(name: &str, languages: &[String]) -> Result<Self> {
        let all = languages.to_vec();
        let one = |l: &str| vec![l.to_string()];
        let low = 30.0 * DESK_HOURS_SCALE;
        let preset = match name {
            "monolingual" => Self::with(name, Protocol::Monolingual { hours: None }, all),
            "english-only" => Self::with(name, Protocol::EnglishOnly { hours: None }, all),
            "multilingual-all" => Self::with(name, Protocol::MultilingualAll, all),
            "multilingual-re" => Self::with(name, Protocol::MultilingualRe { total_hours: None }, all),
            "multilingual-mh" => Self::with(name, Protocol::MultilingualMh { total_hours: None }, all),
            "low-resource-mono" => Self::with(name, Protocol::LowResourceMonolingual { hours: low }, all),
            "low-resource-multi" => Self::with(name, Protocol::LowResourceMultilingual { hours: low }, all),
            "leave-one-out" => Self::with(name, Protocol::LeaveOneOut { total_hours: None }, all),
            _ => {
                if let Some(l) = name.strip_prefix("monolingual-") {
                    Self::with(name, Protocol::Monolingual { hours: None }, one(l))
                } else if let Some(l) = name.strip_prefix("leave-one-out-") {
                    Self::with(name, Protocol::LeaveOneOut { total_hours: None }, one(l))
                } else if let Some((base, added)) = name.strip_prefix("pair-").and_then(|s| s.split_once('-')) {
                    Self::with(name, Protocol::Pair { added: added.to_string(), added_hours: None }, one(base))
                } else {
                    return Err(Error::Config(format!("unknown preset `{name}`")));
                }
            }
        };
        Ok(preset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config(format!("preset `{}` has no evaluation languages", self.name)));
        }
        if let Some(l) = self.languages.iter().find(|l| !corpus::is_language_code(l)) {
            return Err(Error::Config(format!("bad language code `{l}`")));
        }
        if self.pretrain.model.video != self.finetune.encoder {
            return Err(Error::Config("fine-tuning encoder must match the pre-trained video encoder".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) || self.test_fraction == 0.0 {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.beam.validate()
    }

    pub fn fingerprint(&self) -> String {
        seed::fingerprint_json(self)
    }
}

/// Sets `path` (dot-separated keys) inside `root`, creating objects as
/// needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("empty key in `{path}`")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{path}`: `{key}` is not inside an object")))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Recursive object merge; non-object values in `patch` replace.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Parses `key.path=value`; the value is read as JSON and falls back to a
/// plain string.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

/// Layers `file_layer` and then `overrides` on top of `base`.
pub fn apply_layers<T: Serialize + serde::de::DeserializeOwned>(
    base: &T,
    file_layer: Option<&Value>,
    overrides: &[String],
) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(layer) = file_layer {
        merge(&mut v, layer);
    }
    for o in overrides {
        let (k, val) = parse_override(o)?;
        set_path(&mut v, &k, val)?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

/// Layers `file_layer` and then `overrides` on top of the named preset.
pub fn resolve_preset(
    name: &str,
    languages: &[String],
    file_layer: Option<&Value>,
    overrides: &[String],
) -> Result<ExperimentPreset> {
    let preset = apply_layers(&ExperimentPreset::named(name, languages)?, file_layer, overrides)?;
    preset.validate()?;
    Ok(preset)
}

/// Splits labelled clips of every language into pool and test parts; the
/// test part takes `fraction` of each language. Unlabelled clips stay in
/// the pool.
pub fn split_test(corpus: &CorpusManifest, fraction: f64, split_seed: u64) -> (CorpusManifest, CorpusManifest) {
    let mut test_ids = std::collections::HashSet::new();
    for lang in corpus.languages() {
        let labelled: Vec<_> = corpus
            .records
            .iter()
            .filter(|r| r.language == lang && r.is_labelled())
            .cloned()
            .collect();
        let m = corpus.derive(lang.clone(), labelled);
        let (_, test) = finetune::split_heldout(&m, fraction, seed::derive(split_seed, "test_split", &[]) ^ lang_key(&lang));
        test_ids.extend(test.records.into_iter().map(|r| r.id));
    }
    let (test, pool): (Vec<_>, Vec<_>) = corpus.records.iter().cloned().partition(|r| test_ids.contains(&r.id));
    (corpus.derive(format!("{}-pool", corpus.name), pool), corpus.derive(format!("{}-test", corpus.name), test))
}

fn lang_key(lang: &str) -> u64 {
    lang.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64))
}

fn pool_hours(pool: &CorpusManifest, lang: &str) -> f64 {
    hours_by_language(pool).get(lang).copied().unwrap_or(0.0)
}

/// Pre-training plan for one target language.
pub fn plan_for(protocol: &Protocol, pool: &CorpusManifest, target: &str, seed_value: u64) -> Result<SamplingPlan> {
    let langs = pool.languages();
    match protocol {
        Protocol::Monolingual { hours } => plan_monolingual(pool, target, *hours, seed_value),
        Protocol::EnglishOnly { hours } => plan_monolingual(pool, FILL_LANGUAGE, *hours, seed_value),
        Protocol::MultilingualAll => plan_multilingual_all(pool, seed_value),
        Protocol::MultilingualRe { total_hours } => {
            plan_multilingual_re(pool, total_hours.unwrap_or_else(|| pool_hours(pool, FILL_LANGUAGE)), seed_value)
        }
        Protocol::MultilingualMh { total_hours } => {
            Ok(plan_multilingual_mh(&langs, total_hours.unwrap_or_else(|| pool_hours(pool, target)))?.with_seed(seed_value))
        }
        Protocol::LowResourceMonolingual { hours } => plan_monolingual(pool, target, Some(*hours), seed_value),
        Protocol::LowResourceMultilingual { hours } => plan_low_resource(&langs, *hours, seed_value),
        Protocol::Pair { added, added_hours } => {
            plan_pair(pool, target, added, added_hours.unwrap_or_else(|| pool_hours(pool, added)), seed_value)
        }
        Protocol::LeaveOneOut { total_hours } => plan_exclude_language(
            pool,
            target,
            total_hours.unwrap_or_else(|| pool_hours(pool, FILL_LANGUAGE)),
            seed_value,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainArtifact {
    pub key: String,
    pub plan: SamplingPlan,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageResult {
    pub language: String,
    /// Key of the [`PretrainArtifact`] the encoder came from.
    pub pretrain_key: String,
    pub finetune_checkpoint: PathBuf,
    pub finetune_metrics: PathBuf,
    pub report: PathBuf,
    pub corpus_cer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub preset: String,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub code_version: String,
    pub preset_fingerprint: String,
    pub test_fingerprint: String,
    pub pretrain: Vec<PretrainArtifact>,
    pub results: Vec<LanguageResult>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: RunRecord = serde_json::from_str(&text)?;
        r.check_lineage()?;
        Ok(r)
    }

    /// Every fine-tuned model names exactly one pre-training artifact.
    pub fn check_lineage(&self) -> Result<()> {
        for res in &self.results {
            let n = self.pretrain.iter().filter(|p| p.key == res.pretrain_key).count();
            if n != 1 {
                return Err(Error::Config(format!(
                    "run `{}`: `{}` references {n} pre-training artifacts named `{}`",
                    self.preset, res.language, res.pretrain_key
                )));
            }
        }
        Ok(())
    }

    pub fn cer(&self, language: &str) -> Option<f64> {
        self.results.iter().find(|r| r.language == language).map(|r| r.corpus_cer)
    }
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    preset: &'a ExperimentPreset,
    seed: u64,
    code_version: &'a str,
    corpus: &'a str,
    corpus_fingerprint: String,
}

pub fn run_dir_name(preset: &str, seed_value: u64) -> String {
    format!("{preset}-seed{seed_value}")
}

fn labelled(m: &CorpusManifest) -> CorpusManifest {
    let records = m.records.iter().filter(|r| r.is_labelled()).cloned().collect();
    m.derive(m.name.clone(), records)
}

/// Samples, pre-trains, fine-tunes and evaluates every language of
/// `preset` under `run_root/<preset>-seed<seed>`. All sampling plans are
/// checked before any training starts.
pub fn run_preset(preset: &ExperimentPreset, corpus: &CorpusManifest, seed_value: u64, run_root: &Path) -> Result<RunRecord> {
    preset.validate()?;
    let started = Instant::now();
    let corpus_langs = corpus.languages();
    if let Some(l) = preset.languages.iter().find(|l| !corpus_langs.contains(l)) {
        return Err(Error::Config(format!("preset `{}` evaluates `{l}`, absent from the corpus", preset.name)));
    }
    if let Protocol::Pair { added, .. } = &preset.protocol {
        if !corpus_langs.contains(added) {
            return Err(Error::Config(format!("pair language `{added}` absent from the corpus")));
        }
    }
    let (pool, test) = split_test(corpus, preset.test_fraction, preset.split_seed);

    // Plans first, so an infeasible budget fails before any training.
    let mut plans: Vec<(SamplingPlan, CorpusManifest)> = Vec::new();
    let mut plan_of: Vec<usize> = Vec::new();
    for lang in &preset.languages {
        let plan = plan_for(&preset.protocol, &pool, lang, seed_value)?;
        let idx = match plans.iter().position(|(p, _)| p == &plan) {
            Some(i) => i,
            None => {
                let m = materialize(&plan, &pool)?;
                if m.is_empty() {
                    return Err(Error::Budget(format!("pre-training set for `{lang}` is empty")));
                }
                plans.push((plan, m));
                plans.len() - 1
            }
        };
        plan_of.push(idx);
        if test.filter_language(lang).is_empty() {
            return Err(Error::Budget(format!("no test clips for `{lang}`")));
        }
        if labelled(&pool.filter_language(lang)).is_empty() {
            return Err(Error::Budget(format!("no labelled clips to fine-tune `{lang}`")));
        }
    }

    let run_dir = run_root.join(run_dir_name(&preset.name, seed_value));
    fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let snapshot = RunSnapshot {
        preset,
        seed: seed_value,
        code_version: CODE_VERSION,
        corpus: &corpus.name,
        corpus_fingerprint: seed::fingerprint_json(&corpus.records),
    };
    let cfg_path = run_dir.join("config.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&snapshot)? + "\n").map_err(|e| Error::io(&cfg_path, e))?;
    test.save(&run_dir.join("test.jsonl"))?;
    let stats: PreprocessStats = datapipe::compute_stats(&pool)?;
    stats.save(&run_dir.join("stats.json"))?;

    let mut artifacts = Vec::new();
    for (k, (plan, manifest)) in plans.iter().enumerate() {
        let key = format!("pretrain{k}");
        let dir = run_dir.join(&key);
        let manifest_path = dir.join("manifest.jsonl");
        manifest.save(&manifest_path)?;
        let mut cfg = preset.pretrain.clone();
        cfg.seed = seed::derive(seed_value, "preset_pretrain", &[k as u64]);
        info!("{}: pre-training `{key}` on {} clips", preset.name, manifest.len());
        let out = pretrain::run_pretraining(&cfg, manifest, &dir, &RunOptions { stop_after: None, stats: Some(stats) })?;
        artifacts.push(PretrainArtifact { key, plan: plan.clone(), manifest: manifest_path, checkpoint: out.checkpoint, metrics: out.metrics });
    }

    let mut results = Vec::new();
    for (i, lang) in preset.languages.iter().enumerate() {
        let art = &artifacts[plan_of[i]];
        let dir = run_dir.join(format!("finetune-{lang}"));
        let mut cfg = preset.finetune.clone();
        cfg.seed = seed::derive(seed_value, "preset_finetune", &[i as u64]);
        let train = labelled(&pool.filter_language(lang));
        info!("{}: fine-tuning `{lang}` on {} clips", preset.name, train.len());
        let out = finetune::run_finetuning(
            &cfg,
            &train,
            &EncoderInit::Pretrained(art.checkpoint.clone()),
            &dir,
            &FinetuneOptions { stats: Some(stats), max_steps: None },
        )?;
        let (model, weights, _) = finetune::load_vsr(&out.checkpoint)?;
        let tok = Tokenizer::load(&out.tokenizer)?;
        let fp = seed::fingerprint(&fs::read(&out.checkpoint).map_err(|e| Error::io(&out.checkpoint, e))?);
        let report = decode::evaluate(&model, &weights, &test.filter_language(lang), &stats, &preset.beam, &tok, &fp)?;
        let report_path = run_dir.join(format!("cer-{lang}.json"));
        report.save(&report_path)?;
        results.push(LanguageResult {
            language: lang.clone(),
            pretrain_key: art.key.clone(),
            finetune_checkpoint: out.checkpoint,
            finetune_metrics: out.metrics,
            report: report_path,
            corpus_cer: report.corpus_cer,
        });
    }

    let record = RunRecord {
        preset: preset.name.clone(),
        seed: seed_value,
        run_dir: run_dir.clone(),
        code_version: CODE_VERSION.to_string(),
        preset_fingerprint: preset.fingerprint(),
        test_fingerprint: seed::fingerprint_json(&test.records),
        pretrain: artifacts,
        results,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    record.check_lineage()?;
    record.save(&run_dir.join("run_record.json"))?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub preset: String,
    pub seed: u64,
    /// Corpus CER per table language; `None` where the run did not
    /// evaluate that language.
    pub cer: Vec<Option<f64>>,
    pub mean: f64,
    /// `(mean - baseline mean) / baseline mean`.
    pub relative_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub languages: Vec<String>,
    pub baseline: String,
    pub rows: Vec<TableRow>,
}

pub fn relative_change(a: f64, b: f64) -> f64 {
    (a - b) / b
}

impl ComparisonTable {
    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.cer.iter().all(Option::is_some))
    }

    /// Percent CER with one decimal, `-` for missing cells.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Model |");
        for l in &self.languages {
            let _ = write!(s, " {l} |");
        }
        s.push_str(" mean | rel. change |\n|---|");
        s.push_str(&"---|".repeat(self.languages.len() + 2));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} (seed {}) |", r.preset, r.seed);
            for c in &r.cer {
                match c {
                    Some(v) => {
                        let _ = write!(s, " {:.1} |", 100.0 * v);
                    }
                    None => s.push_str(" - |"),
                }
            }
            let _ = write!(s, " {:.1} |", 100.0 * r.mean);
            match r.relative_change {
                Some(v) => {
                    let _ = writeln!(s, " {:+.1}% |", 100.0 * v);
                }
                None => s.push_str(" - |\n"),
            }
        }
        s
    }
}

/// Table of corpus CER per (preset, language). Rows are ordered by preset
/// name, then seed; the relative-change column compares each row's mean to
/// the `baseline` preset (default: the first row).
pub fn compare_runs(records: &[RunRecord], baseline: Option<&str>) -> Result<ComparisonTable> {
    let first = records.first().ok_or_else(|| Error::InvalidArgument("no runs to compare".into()))?;
    if let Some(r) = records.iter().find(|r| r.test_fingerprint != first.test_fingerprint) {
        return Err(Error::InvalidArgument(format!(
            "runs `{}` and `{}` were evaluated on different test sets",
            first.preset, r.preset
        )));
    }
    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.preset.cmp(&b.preset).then(a.seed.cmp(&b.seed)));
    let languages: Vec<String> = {
        let mut ls: Vec<String> = records.iter().flat_map(|r| r.results.iter().map(|x| x.language.clone())).collect();
        ls.sort();
        ls.dedup();
        ls
    };
    let mut rows: Vec<TableRow> = sorted
        .iter()
        .map(|r| {
            let cer: Vec<Option<f64>> = languages.iter().map(|l| r.cer(l)).collect();
            let present: Vec<f64> = cer.iter().flatten().copied().collect();
            let mean = present.iter().sum::<f64>() / present.len().max(1) as f64;
            TableRow { preset: r.preset.clone(), seed: r.seed, cer, mean, relative_change: None }
        })
        .collect();
    let base_name = baseline.unwrap_or(&rows[0].preset).to_string();
    let base = rows
        .iter()
        .find(|r| r.preset == base_name)
        .map(|r| r.mean)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline `{base_name}` is not among the runs")))?;
    for r in &mut rows {
        r.relative_change = (base > 0.0).then(|| relative_change(r.mean, base));
    }
    Ok(ComparisonTable { languages, baseline: base_name, rows })
}

/// Median of the per-seed values; the mean of the middle pair for even
/// counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Summary of [`compare_runs`] keyed by preset, for quick lookups.
pub fn means_by_preset(table: &ComparisonTable) -> BTreeMap<String, f64> {
    table.rows.iter().map(|r| (r.preset.clone(), r.mean)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synthetic_manifest_with_hours;

    fn langs(c: &[&str]) -> Vec<String> {
        c.iter().map(|s| s.to_string()).collect()
    }

    fn record(preset: &str, cers: &[(&str, f64)], test: &str) -> RunRecord {
        RunRecord {
            preset: preset.into(),
            seed: 0,
            run_dir: PathBuf::new(),
            code_version: CODE_VERSION.into(),
            preset_fingerprint: String::new(),
            test_fingerprint: test.into(),
            pretrain: vec![PretrainArtifact {
                key: "p".into(),
                plan: plan_multilingual_mh(&langs(&["es"]), 1.0).unwrap(),
                manifest: PathBuf::new(),
                checkpoint: PathBuf::new(),
                metrics: PathBuf::new(),
            }],
            results: cers
                .iter()
                .map(|(l, c)| LanguageResult {
                    language: l.to_string(),
                    pretrain_key: "p".into(),
                    finetune_checkpoint: PathBuf::new(),
                    finetune_metrics: PathBuf::new(),
                    report: PathBuf::new(),
                    corpus_cer: *c,
                })
                .collect(),
            wall_clock_s: 0.0,
        }
    }

    #[test]
    fn table_rows_sorted_and_relative_change() {
        let a = record("monolingual", &[("es", 0.472), ("pt", 0.435)], "t");
        let b = record("multilingual-re", &[("es", 0.328), ("pt", 0.387)], "t");
        let t = compare_runs(&[b.clone(), a.clone()], Some("monolingual")).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].preset, "monolingual");
        assert!(t.is_complete());
        let mono = (0.472 + 0.435) / 2.0;
        let re = (0.328 + 0.387) / 2.0;
        assert!((t.rows[1].relative_change.unwrap() - (re - mono) / mono).abs() < 1e-15);
        assert_eq!(t.rows[0].relative_change, Some(0.0));
        let md = t.to_markdown();
        assert!(md.contains("| monolingual (seed 0) | 47.2 | 43.5 |"));
    }

    #[test]
    fn mismatched_test_sets_are_rejected() {
        let a = record("a", &[("es", 0.5)], "t1");
        let b = record("b", &[("es", 0.5)], "t2");
        assert!(compare_runs(&[a, b], None).is_err());
    }

    #[test]
    fn missing_cells_are_marked() {
        let a = record("a", &[("es", 0.5)], "t");
        let b = record("b", &[("pt", 0.5)], "t");
        let t = compare_runs(&[a, b], None).unwrap();
        assert!(!t.is_complete());
        assert!(t.to_markdown().contains(" - |"));
    }

    #[test]
    fn lineage_must_be_unique() {
        let mut r = record("a", &[("es", 0.5)], "t");
        r.check_lineage().unwrap();
        r.pretrain.push(r.pretrain[0].clone());
        assert!(r.check_lineage().is_err());
        r.pretrain.clear();
        assert!(r.check_lineage().is_err());
    }

    #[test]
    fn preset_names_resolve() {
        let l = langs(&["en", "es"]);
        for n in ["monolingual", "english-only", "multilingual-all", "multilingual-re", "multilingual-mh", "low-resource-mono", "low-resource-multi", "leave-one-out", "monolingual-es", "pair-es-pt", "leave-one-out-pt"] {
            let p = ExperimentPreset::named(n, &l).unwrap();
            p.validate().unwrap();
        }
        assert!(ExperimentPreset::named("bogus", &l).is_err());
        let p = ExperimentPreset::named("pair-es-pt", &l).unwrap();
        assert_eq!(p.languages, langs(&["es"]));
        assert_eq!(p.protocol, Protocol::Pair { added: "pt".into(), added_hours: None });
    }

    #[test]
    fn layered_overrides() {
        let layer = serde_json::json!({"finetune": {"epochs": 7}, "test_fraction": 0.5});
        let p = resolve_preset(
            "multilingual-mh",
            &langs(&["es"]),
            Some(&layer),
            &["protocol.total_hours=0.6".into(), "pretrain.epochs=2".into(), "pretrain.warmup_epochs=1".into(), "name=custom".into()],
        )
        .unwrap();
        assert_eq!(p.finetune.epochs, 7);
        assert_eq!(p.pretrain.epochs, 2);
        assert_eq!(p.test_fraction, 0.5);
        assert_eq!(p.name, "custom");
        assert_eq!(p.protocol, Protocol::MultilingualMh { total_hours: Some(0.6) });
        assert!(resolve_preset("monolingual", &langs(&["es"]), None, &["test_fraction=2".into()]).is_err());
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn mh_six_languages_share_equally() {
        let hours: BTreeMap<String, f64> =
            ["en", "es", "fr", "it", "pt", "zh"].iter().map(|l| (l.to_string(), 0.2)).collect();
        let pool = synthetic_manifest_with_hours(&hours, (1.0, 4.0), 3).unwrap();
        let plan = plan_for(&Protocol::MultilingualMh { total_hours: Some(0.6) }, &pool, "es", 0).unwrap();
        for h in plan.per_language_hours.values() {
            assert!((h - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn test_split_is_per_language_and_seeded() {
        let hours: BTreeMap<String, f64> = [("en".to_string(), 0.01), ("es".to_string(), 0.01)].into();
        let mut m = synthetic_manifest_with_hours(&hours, (2.0, 4.0), 1).unwrap();
        for r in &mut m.records {
            r.transcript = Some("ba".into());
        }
        let (pool, test) = split_test(&m, 0.25, 9);
        assert_eq!(pool.len() + test.len(), m.len());
        assert_eq!(test.languages(), langs(&["en", "es"]));
        let (_, again) = split_test(&m, 0.25, 9);
        assert_eq!(test, again);
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }
}
