use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn avssl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avssl"))
        .current_dir(dir)
        .env("RUST_LOG", "error")
        .args(["--run-root", "."])
        .args(args)
        .output()
        .expect("spawn avssl")
}

fn find(dir: &Path, prefix: &str) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            name.starts_with(prefix) && name.ends_with(".safetensors")
        })
        .unwrap_or_else(|| panic!("no {prefix}* checkpoint in {}", dir.display()))
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(avssl(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(avssl(dir.path(), &["--help"]).status.code(), Some(0));
    let out = avssl(dir.path(), &["corpus-sample", "--manifest", "missing.jsonl", "--strategy", "nonsense"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sampling_and_training_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |o: Output| {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        o
    };
    ok(avssl(d, &["synth-gen", "--utterances", "6", "--languages", "es,pt", "--seed", "3", "--out", "syn"]));
    let manifest = "syn/manifest.jsonl";

    ok(avssl(d, &["corpus-sample", "--manifest", manifest, "--strategy", "multilingual-all", "--seed", "1", "--out", "all"]));
    assert!(d.join("all/plan.json").exists() && d.join("all/manifest.jsonl").exists());
    // Far more hours than the corpus holds.
    let short = avssl(d, &["corpus-sample", "--manifest", manifest, "--strategy", "monolingual", "--language", "es", "--hours", "50", "--out", "x"]);
    assert_eq!(short.status.code(), Some(1));

    let shrink = ["--set", "epochs=2", "--set", "warmup_epochs=1"];
    let mut args = vec!["pretrain", "--manifest", manifest, "--stop-after", "2", "--out", "pre"];
    args.extend(shrink);
    ok(avssl(d, &args));
    let ck = find(&d.join("pre"), "pretrain");

    ok(avssl(d, &["corpus-sample", "--manifest", manifest, "--strategy", "monolingual", "--language", "es", "--out", "es"]));
    let ck = ck.to_string_lossy().into_owned();
    let mut args = vec!["finetune", "--manifest", "es/manifest.jsonl", "--pretrained", &ck, "--max-steps", "2", "--out", "ft"];
    args.extend(shrink);
    ok(avssl(d, &args));
    let vsr = find(&d.join("ft"), "finetune").to_string_lossy().into_owned();

    ok(avssl(d, &["evaluate", "--checkpoint", &vsr, "--manifest", "es/manifest.jsonl", "--beam", "2", "--out", "cer.json"]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("cer.json")).unwrap()).unwrap();
    assert!(report["corpus_cer"].as_f64().unwrap() >= 0.0);
    ok(avssl(d, &["decode", "--checkpoint", &vsr, "--manifest", "es/manifest.jsonl", "--beam", "2", "--out", "hyp.jsonl"]));
    assert_eq!(std::fs::read_to_string(d.join("hyp.jsonl")).unwrap().lines().count(), 3);

    let missing = avssl(d, &["evaluate", "--checkpoint", "nope.safetensors", "--tokenizer", "ft/tokenizer.txt", "--manifest", manifest]);
    assert_eq!(missing.status.code(), Some(2));
}
