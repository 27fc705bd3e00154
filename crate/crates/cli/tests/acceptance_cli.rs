//! Stage-level acceptance: the full pipeline emits all artifacts on a smoke
//! config, rerunning any stage with identical (config, seed) produces
//! byte-identical artifacts, and the worker count never changes results.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_cfseq")
}

fn run(args: &[&str], workers: Option<&str>) {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    match workers {
        Some(w) => {
            cmd.env("CFSEQ_WORKERS", w);
        }
        None => {
            cmd.env_remove("CFSEQ_WORKERS");
        }
    }
    let out = cmd.output().expect("spawn cfseq");
    assert!(
        out.status.success(),
        "cfseq {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn assert_identical_dirs(a: &Path, b: &Path) {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let fa = read(&a.join(&name));
        let fb = read(&b.join(&name));
        assert_eq!(fa, fb, "{name} differs between {} and {}", a.display(), b.display());
    }
}

const SMOKE_CONFIG: &str = r#"
[generator]
kind = "tumor"
gamma = 1.0
n_train = 32
n_val = 12
n_test = 16
max_len = 20

[model]
tau = 4
z_dim = 8
c_dim = 8
r_dim = 8
fc_hidden = 8
enc_max_epochs = 12
enc_patience = 12
dec_max_epochs = 10
dec_patience = 10
enc_batch = 32
dec_batch = 16

[run]
seeds = [1, 2]
workers = 2
"#;

struct Workdir {
    root: PathBuf,
}

impl Workdir {
    fn new(tag: &str) -> Self {
        let root = std::env::temp_dir().join(format!("cfseq-accept-{tag}-{}", std::process::id()));
        std::fs::remove_dir_all(&root).ok();
        std::fs::create_dir_all(&root).unwrap();
        std::fs::write(root.join("config.toml"), SMOKE_CONFIG).unwrap();
        Workdir { root }
    }

    fn p(&self, s: &str) -> String {
        self.root.join(s).display().to_string()
    }
}

impl Drop for Workdir {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.root).ok();
    }
}

#[test]
fn criterion_9_stage_determinism_and_artifacts() {
    let start = std::time::Instant::now();
    let w = Workdir::new("det");
    let cfgp = w.p("config.toml");

    // Full pipeline, twice, with different worker caps.
    for (tag, workers) in [("a", Some("2")), ("b", Some("1"))] {
        run(&["simulate", "--config", &cfgp, "--seed", "7", "--out", &w.p(&format!("data-{tag}"))], workers);
        run(
            &["pretrain", "--config", &cfgp, "--data", &w.p(&format!("data-{tag}")), "--out", &w.p(&format!("enc-{tag}"))],
            workers,
        );
        run(
            &[
                "train",
                "--config",
                &cfgp,
                "--data",
                &w.p(&format!("data-{tag}")),
                "--encoder",
                &w.p(&format!("enc-{tag}")),
                "--out",
                &w.p(&format!("model-{tag}")),
            ],
            workers,
        );
        run(
            &[
                "evaluate",
                "--config",
                &cfgp,
                "--data",
                &w.p(&format!("data-{tag}")),
                "--model",
                &w.p(&format!("model-{tag}")),
                "--strategy",
                "sliding",
                "--out",
                &w.p(&format!("eval-{tag}")),
            ],
            workers,
        );
    }

    // Expected artifacts exist.
    for f in [
        "data-a/train.csv",
        "data-a/train.meta.txt",
        "data-a/train.simstate.csv",
        "data-a/val.csv",
        "data-a/test.csv",
        "enc-a/encoder_s1.ckpt",
        "enc-a/encoder_log_s1.csv",
        "enc-a/encoder_s2.ckpt",
        "model-a/model_s1.ckpt",
        "model-a/train_log_s1.csv",
        "eval-a/report.csv",
        "eval-a/manifest.txt",
    ] {
        assert!(w.root.join(f).exists(), "missing artifact {f}");
    }

    // Byte-identical across reruns and worker counts.
    assert_identical_dirs(&w.root.join("data-a"), &w.root.join("data-b"));
    assert_identical_dirs(&w.root.join("enc-a"), &w.root.join("enc-b"));
    assert_identical_dirs(&w.root.join("model-a"), &w.root.join("model-b"));
    assert_identical_dirs(&w.root.join("eval-a"), &w.root.join("eval-b"));

    // Report renders from the evaluation CSV.
    run(&["report", "--in", &w.p("eval-a"), "--out", &w.p("chart.svg")], None);
    let svg = std::fs::read_to_string(w.root.join("chart.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));

    println!(
        "criterion 9 PASS: all stage artifacts byte-identical across reruns and CFSEQ_WORKERS in {:?}",
        start.elapsed()
    );
}

#[test]
fn pipeline_errors_are_refusals() {
    let w = Workdir::new("refuse");
    let cfgp = w.p("config.toml");
    run(&["simulate", "--config", &cfgp, "--seed", "7", "--out", &w.p("data")], None);

    // Missing predecessor artifact: nonzero exit naming the expected path.
    let out = Command::new(bin())
        .args(["pretrain", "--config", &cfgp, "--data", &w.p("nowhere"), "--out", &w.p("enc")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("nowhere"), "error should name the missing path: {msg}");

    // Fingerprint mismatch: different gamma, same data.
    let mut other = SMOKE_CONFIG.replace("gamma = 1.0", "gamma = 3.0");
    other.push('\n');
    std::fs::write(w.root.join("other.toml"), other).unwrap();
    let out = Command::new(bin())
        .args(["pretrain", "--config", &w.p("other.toml"), "--data", &w.p("data"), "--out", &w.p("enc2")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("fingerprint"), "expected fingerprint refusal: {msg}");

    // Unknown ablation variant rejected by name.
    let out = Command::new(bin())
        .args(["ablate", "--config", &cfgp, "--variants", "bogus_flag", "--out", &w.p("abl")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("bogus_flag"), "expected variant rejection: {msg}");
}

#[test]
fn smoke_pipeline_under_two_minutes() {
    let start = std::time::Instant::now();
    let w = Workdir::new("smoke");
    let cfgp = w.p("config.toml");
    run(&["simulate", "--config", &cfgp, "--seed", "3", "--out", &w.p("data")], None);
    run(&["pretrain", "--config", &cfgp, "--data", &w.p("data"), "--out", &w.p("enc")], None);
    run(
        &["train", "--config", &cfgp, "--data", &w.p("data"), "--encoder", &w.p("enc"), "--out", &w.p("model")],
        None,
    );
    run(
        &[
            "evaluate", "--config", &cfgp, "--data", &w.p("data"), "--model", &w.p("model"),
            "--strategy", "random", "--out", &w.p("eval"),
        ],
        None,
    );
    run(&["report", "--in", &w.p("eval"), "--out", &w.p("curve.svg")], None);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "smoke pipeline took {elapsed:?}");
    println!("smoke pipeline completed in {elapsed:?}");
}
