//! End-to-end runs of the `scda` binary on a small benchmark.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"{
  "synth": { "train_per_domain": 48, "eval_per_domain": 24 },
  "train": { "total_steps": 6, "batch_size": 16, "eval_every": 3 }
}"#;

fn scda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scda"))
        .args(args)
        .output()
        .expect("spawn scda")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

struct Workspace {
    dir: TempDir,
    config: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        fs::write(&path, config).unwrap();
        Workspace { dir, config: path }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn generate(&self, out: &str) -> PathBuf {
        let dir = self.path(out);
        ok(&scda(&["generate", "--config", p(&self.config), "--out", p(&dir)]));
        dir
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> (PathBuf, Output) {
        let dir = self.path(out);
        let mut args = vec!["train", "--config", p(&self.config), "--data", p(data), "--out", p(&dir)];
        args.extend_from_slice(extra);
        let output = scda(&args);
        (dir, output)
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn generate_writes_four_repeatable_datasets() {
    let ws = Workspace::new(SMALL);
    let a = ws.generate("a");
    let b = ws.generate("b");
    let names = ["source_train.scd", "source_eval.scd", "target_train.scd", "target_eval.scd"];
    for name in names {
        let bytes = fs::read(a.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(&bytes[..4], b"SCD1");
        assert_eq!(bytes, fs::read(b.join(name)).unwrap(), "{name} differs between runs");
    }
    let mut listed: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    listed.sort();
    assert_eq!(listed.len(), 4);
}

#[test]
fn generate_with_a_different_seed_changes_the_data() {
    let ws = Workspace::new(SMALL);
    let a = ws.generate("a");
    let b = ws.path("b");
    ok(&scda(&["generate", "--config", p(&ws.config), "--out", p(&b), "--seed", "7"]));
    assert_ne!(
        fs::read(a.join("source_train.scd")).unwrap(),
        fs::read(b.join("source_train.scd")).unwrap()
    );
}

#[test]
fn generate_with_zero_samples_writes_valid_empty_files() {
    let ws = Workspace::new(r#"{ "synth": { "train_per_domain": 0, "eval_per_domain": 0 } }"#);
    let dir = ws.generate("data");
    let data = scda::synth::load(&dir.join("target_eval.scd")).unwrap();
    assert!(data.is_empty());
}

#[test]
fn train_is_repeatable_and_writes_its_artifacts() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data");
    let (a, out) = ws.train(&data, "a", &[]);
    ok(&out);
    let (b, out) = ws.train(&data, "b", &[]);
    ok(&out);
    for name in ["report.json", "losses.csv", "intervals.csv", "checkpoint.json"] {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs between runs"
        );
    }
    let losses = csv_rows(&a.join("losses.csv"));
    assert_eq!(losses.len(), 6);
    for row in &losses {
        assert_eq!(row.len(), 12);
        assert!(row[3..9].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    let steps: Vec<String> = csv_rows(&a.join("intervals.csv")).into_iter().map(|r| r[0].clone()).collect();
    assert_eq!(steps, ["3", "6"]);
}

#[test]
fn train_ablation_flags_reach_the_report() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data");
    let (dir, out) = ws.train(&data, "run", &["--ablate", "no_pdd,no_mi"]);
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    let ablation = &report["config"]["ablation"];
    assert_eq!(ablation["no_pdd"], true);
    assert_eq!(ablation["no_mi"], true);
    assert_eq!(ablation["no_pdd_st"], false);
    for row in csv_rows(&dir.join("losses.csv")) {
        assert_eq!((row[4].as_str(), row[5].as_str(), row[6].as_str()), ("0", "0", "0"));
    }
}

#[test]
fn train_gamma_enables_the_adversarial_term() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data");
    let (dir, out) = ws.train(&data, "run", &["--gamma", "1"]);
    ok(&out);
    let adv: Vec<f64> = csv_rows(&dir.join("losses.csv")).iter().map(|r| r[7].parse().unwrap()).collect();
    assert!(adv.iter().all(|a| a.is_finite() && *a > 0.0), "{adv:?}");
}

#[test]
fn train_multiple_seeds_writes_one_directory_each() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data");
    let (dir, out) = ws.train(&data, "sweep", &["--seeds", "2", "--jobs", "2"]);
    ok(&out);
    for s in ["seed_0", "seed_1"] {
        assert!(dir.join(s).join("report.json").is_file(), "{s}");
    }
    assert_ne!(
        fs::read(dir.join("seed_0/losses.csv")).unwrap(),
        fs::read(dir.join("seed_1/losses.csv")).unwrap()
    );
}

#[test]
fn train_rejects_bad_inputs() {
    let ws = Workspace::new(SMALL);
    let missing = ws.path("nowhere");
    let (_, out) = ws.train(&missing, "run", &[]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nowhere"), "{err}");

    let data = ws.generate("data");
    let (_, out) = ws.train(&data, "run", &["--ablate", "no_such_term"]);
    assert!(!out.status.success());

    let bad = Workspace::new(r#"{ "train": { "learning_rate": 1.0 } }"#);
    let (_, out) = bad.train(&data, "run", &[]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn eval_confusion_matches_accuracy() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data");
    let (run, out) = ws.train(&data, "run", &[]);
    ok(&out);
    let dir = ws.path("eval");
    let dataset = data.join("target_eval.scd");
    ok(&scda(&[
        "eval",
        "--checkpoint",
        p(&run.join("checkpoint.json")),
        "--dataset",
        p(&dataset),
        "--out",
        p(&dir),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    let confusion: Vec<Vec<u64>> = serde_json::from_value(report["confusion"].clone()).unwrap();
    let labels = scda::synth::load(&dataset).unwrap();
    for (c, row) in confusion.iter().enumerate() {
        let expected = labels.samples.iter().filter(|s| s.label == Some(c)).count() as u64;
        assert_eq!(row.iter().sum::<u64>(), expected);
    }
    let trace: u64 = (0..confusion.len()).map(|c| confusion[c][c]).sum();
    let total: u64 = confusion.iter().flatten().sum();
    assert_eq!(report["accuracy"].as_f64().unwrap(), trace as f64 / total as f64);
    assert_eq!(csv_rows(&dir.join("confusion.csv")).len(), confusion.len());
}

#[test]
fn cam_writes_maps_and_consistent_logits() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data");
    let (run, out) = ws.train(&data, "run", &[]);
    ok(&out);
    let dir = ws.path("cam");
    ok(&scda(&[
        "cam",
        "--checkpoint",
        p(&run.join("checkpoint.json")),
        "--dataset",
        p(&data.join("target_eval.scd")),
        "--samples",
        "0,5",
        "--scale",
        "2",
        "--out",
        p(&dir),
    ]));
    for s in [0, 5] {
        for c in 0..4 {
            let bytes = fs::read(dir.join(format!("cam_{s}_{c}.pgm"))).unwrap();
            assert!(bytes.starts_with(b"P5\n32 32\n255\n"), "cam_{s}_{c}");
            assert_eq!(bytes.len(), b"P5\n32 32\n255\n".len() + 32 * 32);
        }
    }
    let rows = csv_rows(&dir.join("concentration.csv"));
    assert_eq!(rows.len(), 8);
    for r in rows {
        let ratio: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&ratio), "{ratio}");
        let (cam, eval): (f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap());
        assert!((cam - eval).abs() < 1e-10, "{cam} vs {eval}");
    }
}

#[test]
fn cam_rejects_out_of_range_samples() {
    let ws = Workspace::new(SMALL);
    let data = ws.generate("data");
    let (run, out) = ws.train(&data, "run", &[]);
    ok(&out);
    let out = scda(&[
        "cam",
        "--checkpoint",
        p(&run.join("checkpoint.json")),
        "--dataset",
        p(&data.join("target_eval.scd")),
        "--samples",
        "999",
        "--out",
        p(&ws.path("cam")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes_and_catches_a_flipped_reversal() {
    let ws = Workspace::new("{}");
    let dir = ws.path("gc");
    let out = scda(&["gradcheck", "--out", p(&dir)]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for loss in ["ce", "pdd_ss", "pdd_st", "mi", "adv", "total"] {
        assert!(text.lines().any(|l| l.starts_with(loss) && l.ends_with("PASS")), "{loss}\n{text}");
    }
    assert!(dir.join("gradcheck.json").is_file());

    let out = scda(&["gradcheck", "--out", p(&dir), "--inject-grl-fault"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
