use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tialab::commands::{ABLATION, ABLATION_COLUMNS, CONFIG_ECHO, MEMBENCH, PROPOSALS, RESULTS, TRAIN_LOG};
use tialab::tables::{results_average, Table, MEMBENCH_COLUMNS};
use tialab::weights::{MANIFEST, WEIGHTS};

const TINY: &[&str] = &[
    "backbone.layers=2",
    "backbone.dim=16",
    "backbone.mlp_ratio=2",
    "data.train_videos=6",
    "data.test_videos=3",
    "data.min_frames=64",
    "data.max_frames=96",
    "train.window=64",
    "train.epochs=2",
    "train.warmup_epochs=1",
    "membench.frames=16,32",
    "membench.measure_frames=16",
];

fn tialab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tialab"))
        .args(args)
        .env_remove("TIALAB_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd.to_string(), "--out".into(), out.display().to_string()];
    for s in TINY.iter().chain(extra) {
        args.push("--set".into());
        args.push(s.to_string());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = tialab(&args);
    assert!(o.status.success(), "{cmd} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn bytes(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn unknown_keys_are_all_listed() {
    let dir = tempfile::tempdir().unwrap();
    let o = tialab(&["train", "--out", dir.path().to_str().unwrap(), "--set", "train.lrr=1", "--set", "modle.mode=frozen"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("train.lrr") && err.contains("modle.mode"), "{err}");
}

#[test]
fn bad_value_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tialab(&["train", "--out", dir.path().to_str().unwrap(), "--set", "model.mode=sideways"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.mode"));
}

#[test]
fn train_rerun_from_echo_is_identical_and_eval_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, e) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("e"));
    let first = run("train", &a, &[]);
    let stdout = String::from_utf8_lossy(&first.stdout);
    assert!(stdout.contains("[train]") && stdout.contains("# test mAP"), "{stdout}");

    let echo = a.join(CONFIG_ECHO);
    let o = tialab(&["train", "--config", echo.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [RESULTS, PROPOSALS, WEIGHTS, MANIFEST, CONFIG_ECHO] {
        assert_eq!(bytes(a.join(f)), bytes(b.join(f)), "{f} differs");
    }
    let log = Table::read(&a.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.rows.len(), 2);

    let ckpt = format!("eval.checkpoint={}", a.display());
    run("eval", &e, &[&ckpt]);
    let trained = results_average(&Table::read(&a.join(RESULTS)).unwrap(), "a").unwrap();
    let evaluated = results_average(&Table::read(&e.join(RESULTS)).unwrap(), "e").unwrap();
    assert_eq!(trained, evaluated);
    assert_eq!(bytes(a.join(PROPOSALS)), bytes(e.join(PROPOSALS)));
}

#[test]
fn seed_env_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let o = Command::new(env!("CARGO_BIN_EXE_tialab"))
        .args(["gen-data", "--out", out.to_str().unwrap(), "--set", "data.train_videos=2", "--set", "data.test_videos=1"])
        .env("TIALAB_SEED", "17")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(fs::read_to_string(out.join(CONFIG_ECHO)).unwrap().contains("seed = 17"));
}

#[test]
fn generated_dataset_trains_like_generated_videos() {
    let dir = tempfile::tempdir().unwrap();
    let (data, a, b) = (dir.path().join("data"), dir.path().join("a"), dir.path().join("b"));
    run("gen-data", &data, &[]);
    assert!(data.join("train").is_dir() && data.join("test").is_dir());
    run("train", &a, &["train.epochs=1"]);
    let path = format!("data.path={}", data.display());
    run("train", &b, &["train.epochs=1", &path]);
    assert_eq!(bytes(a.join(RESULTS)), bytes(b.join(RESULTS)));
    assert_eq!(bytes(a.join(WEIGHTS)), bytes(b.join(WEIGHTS)));
}

#[test]
fn membench_and_ablate_tables_parse() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m");
    run("membench", &m, &[]);
    let t = Table::read(&m.join(MEMBENCH)).unwrap();
    t.expect_header(&MEMBENCH_COLUMNS, "membench").unwrap();
    assert!(t.rows.iter().all(|r| r[9].parse::<u64>().is_ok()));

    let ab = dir.path().join("ab");
    run("ablate", &ab, &["ablate.axis=kernel_k", "ablate.values=1,5", "train.epochs=1"]);
    let t = Table::read(&ab.join(ABLATION)).unwrap();
    t.expect_header(&ABLATION_COLUMNS, "ablation").unwrap();
    let values: Vec<&str> = t.rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(values, ["1", "5"]);
    let adapter: Vec<usize> = t.rows.iter().map(|r| r[4].parse().unwrap()).collect();
    assert!(adapter[0] < adapter[1]);
}
