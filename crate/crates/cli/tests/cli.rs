use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clip-decoder"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?} failed:\n{}\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

const SMALL_SYNTH: &[&str] = &[
    "--set", "classes=10",
    "--set", "train_samples=60",
    "--set", "test_samples=20",
    "--set", "tokens_per_image=4",
    "--set", "image_dim=12",
    "--set", "text_dim=8",
    "--set", "max_labels=2",
];

const SMALL_TRAIN: &[&str] = &["--epochs", "2", "--batch-size", "16", "--set", "d_model=8", "--set", "n_heads=2"];

fn small_data(dir: &Path, name: &str) -> PathBuf {
    let mut args = vec!["gen-synth", "--seed", "3", "--out", name];
    args.extend_from_slice(SMALL_SYNTH);
    ok(dir, &args);
    dir.join(name)
}

fn small_train(dir: &Path, out: &str, extra: &[&str]) -> String {
    let mut args = vec!["train", "--train", "d/train.cdec", "--bank", "d/bank.cdec", "--out", out];
    args.extend_from_slice(SMALL_TRAIN);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

fn files_equal(a: &Path, b: &Path) {
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{} vs {}", a.display(), b.display());
}

#[test]
fn gen_synth_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = small_data(tmp.path(), "a");
    let b = small_data(tmp.path(), "b");
    for f in ["train.cdec", "test_zsl.cdec", "test_gzsl.cdec", "bank.cdec"] {
        files_equal(&a.join(f), &b.join(f));
    }
    let mut args = vec!["gen-synth", "--seed", "4", "--out", "c"];
    args.extend_from_slice(SMALL_SYNTH);
    ok(tmp.path(), &args);
    assert_ne!(fs::read(a.join("bank.cdec")).unwrap(), fs::read(tmp.path().join("c/bank.cdec")).unwrap());
}

#[test]
fn train_eval_predict_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir, "d");
    let printed = small_train(dir, "a.cdec", &["--log", "a.jsonl"]);
    small_train(dir, "b.cdec", &[]);
    files_equal(&dir.join("a.cdec"), &dir.join("b.cdec"));
    assert!(printed.contains("epochs") && printed.contains("= 2  [flag]"));
    assert!(printed.contains("= 0.001  [default]"));

    let log = fs::read_to_string(dir.join("a.jsonl")).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2 * 4);
    for key in ["step", "epoch", "total", "clip", "classification", "wall_seconds"] {
        assert!(lines[0].get(key).is_some(), "log line lacks {key}");
    }

    for (i, out) in ["r1.json", "r2.json"].iter().enumerate() {
        let text = ok(
            dir,
            &["eval", "--checkpoint", "a.cdec", "--test", "d/test_gzsl.cdec", "--bank", "d/bank.cdec", "--mode", "gzsl", "--gamma", "0.5", "--out", out],
        );
        if i == 0 {
            assert!(text.contains("gamma = 0.5  [flag]"));
            assert!(text.contains("F1 k=3"));
        }
    }
    files_equal(&dir.join("r1.json"), &dir.join("r2.json"));

    let p1 = ok(dir, &["predict", "--checkpoint", "a.cdec", "--data", "d/test_gzsl.cdec", "--bank", "d/bank.cdec", "--index", "2", "--top", "3"]);
    let p2 = ok(dir, &["predict", "--checkpoint", "a.cdec", "--data", "d/test_gzsl.cdec", "--bank", "d/bank.cdec", "--index", "2", "--top", "3"]);
    assert_eq!(p1, p2);
    assert_eq!(p1.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).count(), 3);

    let o = run(dir, &["predict", "--checkpoint", "a.cdec", "--data", "d/test_gzsl.cdec", "--bank", "d/bank.cdec", "--index", "999"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_file_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir, "d");
    fs::write(dir.join("run.kv"), "# small run\nseed = 3\nalpha = 0.5\nepochs = 5\n").unwrap();
    let text = small_train(dir, "c.cdec", &["--config", "run.kv", "--seed", "9"]);
    let line = |key: &str| text.lines().find(|l| l.trim_start().starts_with(key)).unwrap().to_string();
    assert!(line("seed").ends_with("= 9  [flag]"), "{}", line("seed"));
    assert!(line("alpha").ends_with("= 0.5  [file]"));
    assert!(line("epochs").ends_with("= 2  [flag]"));
    assert!(line("beta ").ends_with("= 1  [default]"));

    fs::write(dir.join("bad.kv"), "epochz = 3\n").unwrap();
    let o = run(dir, &["train", "--train", "d/train.cdec", "--bank", "d/bank.cdec", "--out", "x.cdec", "--config", "bad.kv"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown config key"));
    assert!(!dir.join("x.cdec").exists());
}

#[test]
fn protocol_violation_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir, "d");
    small_train(dir, "a.cdec", &[]);
    let o = run(dir, &["eval", "--checkpoint", "a.cdec", "--test", "d/test_gzsl.cdec", "--bank", "d/bank.cdec", "--mode", "zsl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("protocol violation"));

    let o = run(dir, &["train", "--train", "d/test_gzsl.cdec", "--bank", "d/bank.cdec", "--out", "bad.cdec"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.join("bad.cdec").exists());
}

#[test]
fn corrupted_input_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir, "d");
    let path = dir.join("d/bank.cdec");
    let mut bytes = fs::read(&path).unwrap();
    let at = bytes.len() / 2;
    bytes[at] ^= 1;
    fs::write(&path, bytes).unwrap();
    let o = run(dir, &["prompts", "render", "--bank", "d/bank.cdec"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum"));
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["train", "--bogus"],
        vec!["frobnicate"],
        vec![],
        vec!["eval", "--checkpoint", "a", "--test", "b", "--bank", "c", "--mode", "maybe"],
        vec!["gen-synth", "--out", "x", "--set", "classes"],
        vec!["gen-synth", "--out", "x", "--set", "colours=3"],
        vec!["prompts", "render", "--template", "missing", "--labels", "sky"],
    ] {
        let o = run(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn help_documents_every_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: &[(&[&str], &[&str])] = &[
        (&["gen-synth"], &["--out", "--seed", "--config", "--set"]),
        (&["train"], &["--train", "--bank", "--out", "--log", "--seed", "--config", "--set", "--epochs", "--batch-size", "--lr"]),
        (&["eval"], &["--checkpoint", "--test", "--bank", "--mode", "--gamma", "--ks", "--out"]),
        (&["predict"], &["--checkpoint", "--data", "--bank", "--index", "--top", "--mode", "--gamma"]),
        (&["ablate"], &["--train", "--test", "--bank", "--seeds", "--mode", "--out", "--config", "--set", "--epochs", "--batch-size", "--lr"]),
        (&["prompts", "list"], &[]),
        (&["prompts", "render"], &["--labels", "--template", "--pattern", "--bank"]),
        (&["gradcheck"], &["--seeds", "--tolerance"]),
    ];
    for (sub, flags) in cases {
        let mut args = sub.to_vec();
        args.push("--help");
        let o = run(tmp.path(), &args);
        assert_eq!(o.status.code(), Some(0), "{args:?}");
        let text = stdout(&o);
        for flag in *flags {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(flag))
                .unwrap_or_else(|| panic!("{sub:?} help lacks {flag}"));
            assert!(line.trim().len() > flag.len() + 8, "{sub:?} {flag} is undocumented");
        }
    }
}

#[test]
fn prompts_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let list = ok(tmp.path(), &["prompts", "list"]);
    assert!(list.lines().any(|l| l == "photo\ta photo of {labels}"));
    assert_eq!(ok(tmp.path(), &["prompts", "render", "--labels", "sky,car,road"]), "a photo of sky, car and road\n");
    assert_eq!(ok(tmp.path(), &["prompts", "render", "--pattern", "look: {labels}!", "--labels", "sky"]), "look: sky!\n");
    small_data(tmp.path(), "d");
    let classes = ok(tmp.path(), &["prompts", "render", "--bank", "d/bank.cdec", "--template", "bare"]);
    assert_eq!(classes.lines().count(), 10);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(tmp.path(), &["gradcheck", "--seeds", "2"]);
    assert!(text.contains("max relative error"));
    let o = run(tmp.path(), &["gradcheck", "--seeds", "1", "--tolerance", "1e-30"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_paired_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_data(dir, "d");
    let mut args = vec!["ablate", "--train", "d/train.cdec", "--test", "d/test_zsl.cdec", "--bank", "d/bank.cdec", "--seeds", "0,1", "--out", "ab.json"];
    args.extend_from_slice(SMALL_TRAIN);
    let text = ok(dir, &args);
    assert!(text.contains("median delta mAP over 2 seeds"));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.join("ab.json")).unwrap()).unwrap();
    let runs = v["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for r in runs {
        let delta = r["joint"]["map"].as_f64().unwrap() - r["classification_only"]["map"].as_f64().unwrap();
        assert!((delta - r["delta_map"].as_f64().unwrap()).abs() < 1e-15);
    }
    assert!(v["median_delta_map"].is_number());
}

fn all_fractions(v: &Value, path: &str) {
    match v {
        Value::Object(m) => m.iter().for_each(|(k, v)| {
            if !matches!(k.as_str(), "records" | "classes" | "k") {
                all_fractions(v, &format!("{path}.{k}"))
            }
        }),
        Value::Array(a) => a.iter().enumerate().for_each(|(i, v)| all_fractions(v, &format!("{path}[{i}]"))),
        Value::Number(n) => {
            let x = n.as_f64().unwrap();
            assert!((0.0..=1.0).contains(&x), "{path} = {x}");
        }
        _ => {}
    }
}

#[test]
fn full_pipeline_on_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let started = std::time::Instant::now();
    ok(dir, &["gen-synth", "--out", "d"]);
    ok(dir, &["train", "--train", "d/train.cdec", "--bank", "d/bank.cdec", "--out", "head.cdec"]);
    ok(dir, &["eval", "--checkpoint", "head.cdec", "--test", "d/test_zsl.cdec", "--bank", "d/bank.cdec", "--mode", "zsl", "--out", "report.json"]);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "pipeline took {elapsed:.1}s");
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    for key in ["map", "per_class", "top_k", "records", "classes"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["classes"], 8);
    assert_eq!(report["records"], 200);
    all_fractions(&report, "report");
}
