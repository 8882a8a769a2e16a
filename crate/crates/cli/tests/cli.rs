use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use confexit_core::attnviz::validate_profile_json;
use serde_json::Value;
use tempfile::TempDir;

const TOY: &str = "depth = 3\nhidden_dim = 16\nnum_heads = 2\nffn_dim = 32\nembed_dim = 8\n\
                   vocab_size = 64\nmax_seq_len = 24\nepochs = 4\nbatch_size = 16\nseed = 3\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_confexit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(out: Output) -> Output {
    assert_eq!(
        code(&out),
        0,
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ckpt(&self) -> PathBuf {
        self.path("run/model.ckpt")
    }
}

/// Synthetic data plus one trained toy model, shared by the read-only tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let f = Fixture { dir };
        ok(run(&[
            "synth",
            "--n",
            "64",
            "--seed",
            "1",
            "--out",
            s(&f.path("train.tsv")),
        ]));
        ok(run(&[
            "synth",
            "--n",
            "40",
            "--seed",
            "2",
            "--out",
            s(&f.path("test.tsv")),
        ]));
        std::fs::write(f.path("toy.conf"), TOY).unwrap();
        ok(run(&[
            "train",
            "--config",
            s(&f.path("toy.conf")),
            "--data",
            s(&f.path("train.tsv")),
            "--out",
            s(&f.path("run")),
        ]));
        f
    })
}

fn total_losses(metrics: &str) -> Vec<f64> {
    metrics
        .lines()
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn train_writes_artifacts_and_loss_falls() {
    let f = fixture();
    assert!(f.ckpt().exists());
    assert!(f.path("run/vocab.txt").exists());
    let metrics = std::fs::read_to_string(f.path("run/metrics.csv")).unwrap();
    let losses = total_losses(&metrics);
    assert_eq!(losses.len(), 4);
    assert!(losses[3] < losses[0], "{losses:?}");
    // epoch, total, 3 layer losses, 3 weights
    assert!(metrics.lines().all(|l| l.split(',').count() == 8));
}

#[test]
fn same_seed_same_metrics() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    ok(run(&[
        "train",
        "--config",
        s(&f.path("toy.conf")),
        "--data",
        s(&f.path("train.tsv")),
        "--out",
        s(out.path()),
    ]));
    assert_eq!(
        std::fs::read(out.path().join("metrics.csv")).unwrap(),
        std::fs::read(f.path("run/metrics.csv")).unwrap()
    );
    assert_eq!(
        std::fs::read(out.path().join("model.ckpt")).unwrap(),
        std::fs::read(f.ckpt()).unwrap()
    );
}

#[test]
fn repeat_uses_consecutive_seeds() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let res = ok(run(&[
        "train",
        "--config",
        s(&f.path("toy.conf")),
        "--data",
        s(&f.path("train.tsv")),
        "--out",
        s(out.path()),
        "--epochs",
        "1",
        "--repeat",
        "2",
        "--json",
    ]));
    let summary: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(summary[0]["seed"], 3);
    assert_eq!(summary[1]["seed"], 4);
    let a = std::fs::read(out.path().join("run-0/model.ckpt")).unwrap();
    let b = std::fs::read(out.path().join("run-1/model.ckpt")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn train_failures_map_to_exit_codes() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let conf = f.path("toy.conf");
    let base = |extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&conf), "--out", s(out.path())];
        args.extend_from_slice(extra);
        run(&args)
    };
    assert_eq!(code(&base(&["--data", s(&f.path("missing.tsv"))])), 2);
    assert_eq!(
        code(&base(&[
            "--data",
            s(&f.path("train.tsv")),
            "--set",
            "bogus=1"
        ])),
        2
    );
    assert_eq!(
        code(&base(&[
            "--data",
            s(&f.path("train.tsv")),
            "--set",
            "num_heads=3"
        ])),
        2
    );
    let diverged = base(&[
        "--data",
        s(&f.path("train.tsv")),
        "--set",
        "learning_rate=1e300",
    ]);
    assert_eq!(code(&diverged), 3);
    assert!(!out.path().join("model.ckpt").exists());
    assert_eq!(code(&run(&["train", "--no-such-flag"])), 2);
}

fn sweep_json(extra: &[&str]) -> Value {
    let f = fixture();
    let (ckpt, data) = (f.ckpt(), f.path("test.tsv"));
    let mut args = vec![
        "sweep",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--json",
    ];
    args.extend_from_slice(extra);
    serde_json::from_slice(&ok(run(&args)).stdout).unwrap()
}

#[test]
fn sweep_default_grid() {
    let v = sweep_json(&["--baselines"]);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 11);
    assert_eq!(points[0]["delta"], 0.0);
    assert_eq!(points[10]["delta"], 1.0);
    assert_eq!(v["baselines"].as_array().unwrap().len(), 3);
}

#[test]
fn sweep_flags_reach_metadata() {
    let v = sweep_json(&["--criterion", "stable-label"]);
    assert!(v["points"]
        .as_array()
        .unwrap()
        .iter()
        .all(|p| p["criterion"] == "stable-label"));
    let v = sweep_json(&["--stages", "s1", "--deltas", "0.3,0.6"]);
    let points = v["points"].as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert!(points.iter().all(|p| p["stages"] == "s1"));
}

#[test]
fn sweep_writes_curve_files() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let csv = out.path().join("curves.csv");
    ok(run(&[
        "sweep",
        "--checkpoint",
        s(&f.ckpt()),
        "--data",
        s(&f.path("test.tsv")),
        "--out",
        s(&csv),
    ]));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "delta,accuracy,cost_ratio,layer_1,layer_2,layer_3"
    );
    assert_eq!(text.lines().count(), 12);
}

#[test]
fn sweep_class_mismatch_is_config_error() {
    let f = fixture();
    let out = run(&[
        "sweep",
        "--checkpoint",
        s(&f.ckpt()),
        "--data",
        s(&f.path("test.tsv")),
        "--set",
        "num_classes=3",
    ]);
    assert_eq!(code(&out), 2);
    std::fs::write(f.path("three.tsv"), "2\tgreat film\n").unwrap();
    let out = run(&[
        "sweep",
        "--checkpoint",
        s(&f.ckpt()),
        "--data",
        s(&f.path("three.tsv")),
    ]);
    assert_eq!(code(&out), 2);
}

fn infer_json(text: &str, extra: &[&str]) -> Value {
    let f = fixture();
    let ckpt = f.ckpt();
    let mut args = vec!["infer", "--checkpoint", s(&ckpt), "--text", text, "--json"];
    args.extend_from_slice(extra);
    serde_json::from_slice(&ok(run(&args)).stdout).unwrap()
}

#[test]
fn infer_reports() {
    let v = infer_json("a truly great film", &["--stages", "none"]);
    assert_eq!(v["exit_layer"], 3);
    assert_eq!(v["reason"], "Exhausted");
    assert_eq!(v["fired"], false);
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    for l in layers {
        let p = l["puzzlement"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
    assert_eq!(v["label"], layers[2]["label"]);

    let v = infer_json("a truly great film", &["--delta", "1.0"]);
    assert_eq!(v["exit_layer"], 1);
    assert_eq!(v["reason"], "Stage1");
}

#[test]
fn infer_text_output_and_empty_text() {
    let f = fixture();
    let out = ok(run(&[
        "infer",
        "--checkpoint",
        s(&f.ckpt()),
        "--text",
        "boring plot",
    ]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("label "));
    assert!(text.contains("exit layer"));
    let out = run(&["infer", "--checkpoint", s(&f.ckpt()), "--text", "   "]);
    assert_eq!(code(&out), 2);
    let out = run(&[
        "infer",
        "--checkpoint",
        s(&f.path("nope.ckpt")),
        "--text",
        "x",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn viz_writes_valid_profile_and_svg() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let json = out.path().join("p.json");
    let svg = out.path().join("p.svg");
    ok(run(&[
        "viz",
        "--checkpoint",
        s(&f.ckpt()),
        "--text",
        "the acting was not brilliant",
        "--delta",
        "0.0",
        "--out",
        s(&json),
        "--svg",
        s(&svg),
    ]));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    validate_profile_json(&v).unwrap();
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len() as u64, v["exit"]["layer"].as_u64().unwrap());
    assert_eq!(v["tokens"][0], "[cls]");
    assert!(layers.iter().all(|l| l["predicted_label"].is_u64()));

    let again = out.path().join("q.svg");
    ok(run(&["render", "--profile", s(&json), "--out", s(&again)]));
    assert_eq!(std::fs::read(&svg).unwrap(), std::fs::read(&again).unwrap());
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));
}

#[test]
fn viz_layer_count_follows_exit() {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let json = out.path().join("p.json");
    ok(run(&[
        "viz",
        "--checkpoint",
        s(&f.ckpt()),
        "--text",
        "great",
        "--delta",
        "1.0",
        "--out",
        s(&json),
    ]));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["layers"].as_array().unwrap().len(), 1);
    assert_eq!(v["exit"]["layer"], 1);
    assert_eq!(v["exit"]["reason"], "Stage1");
}
