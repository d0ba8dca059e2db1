use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use serde_json::Value;

use avssl::corpus::{
    self, generate_synthetic_corpus, load_manifest, materialize, split_long_utterances, CorpusManifest,
    SyntheticConfig,
};
use avssl::decode::{self, BeamConfig};
use avssl::experiment::{self, apply_layers, compare_runs, resolve_preset, RunRecord};
use avssl::finetune::{self, EncoderInit, FinetuneConfig, FinetuneOptions, Tokenizer};
use avssl::pretrain::{self, PretrainConfig, RunOptions};
use avssl::{seed, Error, Result};

#[derive(Parser)]
#[command(name = "avssl", version, about = "Audio-visual self-supervised pre-training and lip-reading fine-tuning")]
struct Cli {
    /// Every output path is resolved under this directory.
    #[arg(long, global = true, default_value = "runs")]
    run_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate manifests, merge them and split clips longer than the limit.
    CorpusBuild {
        #[arg(long = "input", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value_t = corpus::DEFAULT_MAX_DURATION_S)]
        max_duration: f64,
        /// Reject records outside this comma-separated list.
        #[arg(long, value_delimiter = ',')]
        languages: Vec<String>,
        #[arg(long, default_value = "corpus/manifest.jsonl")]
        out: PathBuf,
    },
    /// Draw a pre-training subset under one of the sampling protocols.
    CorpusSample {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        strategy: Strategy,
        /// Target language (monolingual), base language (pair) or excluded
        /// language (exclude).
        #[arg(long)]
        language: Option<String>,
        /// Language added to the base (pair).
        #[arg(long)]
        added: Option<String>,
        #[arg(long)]
        hours: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "sample")]
        out: PathBuf,
    },
    /// Render a deterministic synthetic corpus.
    SynthGen {
        #[arg(long, default_value_t = 12)]
        utterances: usize,
        #[arg(long, value_delimiter = ',', default_value = "en,es")]
        languages: Vec<String>,
        #[arg(long, default_value_t = 0.6)]
        min_duration: f64,
        #[arg(long, default_value_t = 0.96)]
        max_duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
    /// Student/teacher pre-training on an unlabelled manifest.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        layers: Layers,
        #[arg(long)]
        stop_after: Option<usize>,
        #[arg(long, default_value = "pretrain")]
        out: PathBuf,
    },
    /// Joint CTC/attention fine-tuning on a transcribed single-language manifest.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        /// Pre-training checkpoint; random initialization when absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[command(flatten)]
        layers: Layers,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long, default_value = "finetune")]
        out: PathBuf,
    },
    /// Transcribe every clip of a manifest.
    Decode {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "hypotheses.jsonl")]
        out: PathBuf,
    },
    /// Transcribe and score against reference transcripts.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "cer_report.json")]
        out: PathBuf,
    },
    /// Sample, pre-train, fine-tune and evaluate one experiment preset.
    RunPreset {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        corpus: PathBuf,
        /// Evaluation languages; defaults to every corpus language.
        #[arg(long, value_delimiter = ',')]
        languages: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        layers: Layers,
    },
    /// Tabulate corpus CER of finished runs.
    Compare {
        /// `run_record.json` files or run directories.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long, default_value = "comparison")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Monolingual,
    MultilingualAll,
    MultilingualRe,
    MultilingualMh,
    LowResource,
    Exclude,
    Pair,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Args)]
struct Layers {
    /// Base configuration.
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// JSON file merged over the base.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` overrides applied last.
    #[arg(long = "set")]
    sets: Vec<String>,
}

impl Layers {
    fn file(&self) -> Result<Option<Value>> {
        self.config
            .as_ref()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            })
            .transpose()
    }

    fn resolve<T: serde::Serialize + serde::de::DeserializeOwned>(&self, desk: T, paper: T) -> Result<T> {
        let base = match self.scale {
            Scale::Desk => desk,
            Scale::Paper => paper,
        };
        apply_layers(&base, self.file()?.as_ref(), &self.sets)
    }
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to `tokenizer.txt` next to the checkpoint.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = BeamConfig::default().beam_size)]
    beam: usize,
    #[arg(long, default_value_t = BeamConfig::default().ctc_weight)]
    ctc_weight: f64,
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| io(path, e))
}

fn load_run(path: &Path) -> Result<RunRecord> {
    if path.is_dir() {
        RunRecord::load(&path.join("run_record.json"))
    } else {
        RunRecord::load(path)
    }
}

struct Loaded {
    vsr: avssl::model::VsrModel,
    weights: avssl::model::ModelWeights,
    stats: avssl::datapipe::PreprocessStats,
    tok: Tokenizer,
    manifest: CorpusManifest,
    beam: BeamConfig,
    fingerprint: String,
}

fn load_model(model: &ModelArgs) -> Result<Loaded> {
    let (vsr, weights, info) = finetune::load_vsr(&model.checkpoint)?;
    let tok_path = model
        .tokenizer
        .clone()
        .unwrap_or_else(|| model.checkpoint.with_file_name("tokenizer.txt"));
    let tok = Tokenizer::load(&tok_path)?;
    let manifest = load_manifest(&model.manifest)?;
    let beam = BeamConfig { beam_size: model.beam, ctc_weight: model.ctc_weight, ..info.finetune.beam };
    beam.validate()?;
    let bytes = fs::read(&model.checkpoint).map_err(|e| io(&model.checkpoint, e))?;
    Ok(Loaded { vsr, weights, stats: info.stats, tok, manifest, beam, fingerprint: seed::fingerprint(&bytes) })
}

fn run(cli: Cli) -> Result<()> {
    let root = &cli.run_root;
    let under = |p: &Path| root.join(p);
    match &cli.cmd {
        Cmd::CorpusBuild { inputs, max_duration, languages, out } => {
            if *max_duration <= 0.0 {
                return Err(Error::Config("max_duration must be positive".into()));
            }
            let mut records = Vec::new();
            let mut base: Option<PathBuf> = None;
            for p in inputs {
                let m = load_manifest(p)?;
                // Rewrite every input relative to the first one's media root.
                let first = base.get_or_insert_with(|| m.base_dir.clone()).clone();
                for line in m.to_jsonl(&first)?.lines() {
                    records.push(serde_json::from_str(line)?);
                }
            }
            let merged = CorpusManifest::new("corpus", records)?.with_base_dir(base.unwrap_or_default());
            if !languages.is_empty() {
                merged.validate_languages(languages)?;
            }
            let built = split_long_utterances(&merged, *max_duration);
            let path = under(out);
            built.save(&path)?;
            for (l, h) in corpus::hours_by_language(&built) {
                println!("{l}\t{h:.4} h");
            }
            println!("wrote {} records to {}", built.len(), path.display());
        }
        Cmd::CorpusSample { manifest, strategy, language, added, hours, seed, out } => {
            let m = load_manifest(manifest)?;
            let need = |o: &Option<String>, what: &str| {
                o.clone().ok_or_else(|| Error::Config(format!("--{what} is required for this strategy")))
            };
            let need_h = || hours.ok_or_else(|| Error::Config("--hours is required for this strategy".into()));
            let s = seed.unwrap_or(0);
            let plan = match strategy {
                Strategy::Monolingual => corpus::plan_monolingual(&m, &need(language, "language")?, *hours, s)?,
                Strategy::MultilingualAll => corpus::plan_multilingual_all(&m, s)?,
                Strategy::MultilingualRe => corpus::plan_multilingual_re(&m, need_h()?, s)?,
                Strategy::MultilingualMh => corpus::plan_multilingual_mh(&m.languages(), need_h()?)?.with_seed(s),
                Strategy::LowResource => corpus::plan_low_resource(&m.languages(), need_h()?, s)?,
                Strategy::Exclude => corpus::plan_exclude_language(&m, &need(language, "language")?, need_h()?, s)?,
                Strategy::Pair => {
                    corpus::plan_pair(&m, &need(language, "language")?, &need(added, "added")?, need_h()?, s)?
                }
            };
            let dir = under(out);
            let sampled = materialize(&plan, &m)?;
            write_json(&dir.join("plan.json"), &plan)?;
            sampled.save(&dir.join("manifest.jsonl"))?;
            for (l, h) in corpus::hours_by_language(&sampled) {
                println!("{l}\t{h:.4} h");
            }
        }
        Cmd::SynthGen { utterances, languages, min_duration, max_duration, seed, out } => {
            let cfg = SyntheticConfig::new(*utterances, languages.clone(), (*min_duration, *max_duration), *seed);
            let dir = under(out);
            let m = generate_synthetic_corpus(&cfg, &dir)?;
            println!("wrote {} utterances to {}", m.len(), dir.join("manifest.jsonl").display());
        }
        Cmd::Pretrain { manifest, layers, stop_after, out } => {
            let cfg: PretrainConfig = layers.resolve(PretrainConfig::desk(), PretrainConfig::paper())?;
            let m = load_manifest(manifest)?;
            let dir = under(out);
            write_json(&dir.join("config.json"), &cfg)?;
            let o = pretrain::run_pretraining(&cfg, &m, &dir, &RunOptions { stop_after: *stop_after, stats: None })?;
            println!("{} steps, checkpoint {}", o.steps, o.checkpoint.display());
        }
        Cmd::Finetune { manifest, pretrained, layers, max_steps, out } => {
            let cfg: FinetuneConfig = layers.resolve(FinetuneConfig::desk(), FinetuneConfig::paper())?;
            let m = load_manifest(manifest)?;
            let init = match pretrained {
                Some(p) => EncoderInit::Pretrained(p.clone()),
                None => EncoderInit::Random,
            };
            let dir = under(out);
            write_json(&dir.join("config.json"), &cfg)?;
            let o = finetune::run_finetuning(&cfg, &m, &init, &dir, &FinetuneOptions { stats: None, max_steps: *max_steps })?;
            println!("final train loss {:.4}, checkpoint {}", o.final_train_loss(), o.checkpoint.display());
        }
        Cmd::Decode { model, out } => {
            let l = load_model(model)?;
            let mut text = String::new();
            for r in &l.manifest.records {
                let (video, _) = avssl::datapipe::load_record(&l.manifest, r, &l.stats)?;
                let hyp = decode::decode_clip(&l.vsr, &l.weights, &video, &l.beam, &l.tok)?;
                println!("{}\t{}", r.id, hyp);
                text.push_str(&serde_json::json!({"id": r.id, "hypothesis": hyp}).to_string());
                text.push('\n');
            }
            let path = under(out);
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
            }
            fs::write(&path, text).map_err(|e| io(&path, e))?;
        }
        Cmd::Evaluate { model, out } => {
            let l = load_model(model)?;
            let report = decode::evaluate(&l.vsr, &l.weights, &l.manifest, &l.stats, &l.beam, &l.tok, &l.fingerprint)?;
            report.save(&under(out))?;
            println!(
                "CER {:.2}% ({} edits / {} characters)",
                100.0 * report.corpus_cer,
                report.total_edits,
                report.total_ref_len
            );
        }
        Cmd::RunPreset { preset, corpus, languages, seed, layers } => {
            let m = load_manifest(corpus)?;
            let langs = if languages.is_empty() { m.languages() } else { languages.clone() };
            let p = resolve_preset(preset, &langs, layers.file()?.as_ref(), &layers.sets)?;
            let record = experiment::run_preset(&p, &m, *seed, root)?;
            for r in &record.results {
                println!("{}\t{:.2}%", r.language, 100.0 * r.corpus_cer);
            }
            println!("run record {}", record.run_dir.join("run_record.json").display());
        }
        Cmd::Compare { runs, baseline, out } => {
            let records = runs.iter().map(|p| load_run(p)).collect::<Result<Vec<_>>>()?;
            let table = compare_runs(&records, baseline.as_deref())?;
            let md = table.to_markdown();
            print!("{md}");
            let dir = under(out);
            write_json(&dir.join("table.json"), &table)?;
            let md_path = dir.join("table.md");
            fs::write(&md_path, md).map_err(|e| io(&md_path, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
