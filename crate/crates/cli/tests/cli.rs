use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cyclecap::caption::{canonical_caption, detokenize};
use cyclecap::render::render_scene;
use cyclecap::world::load_dataset;
use cyclecap::{Checkpoint, RendererConfig, Vocab};

fn cyclecap(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cyclecap"))
        .args(args)
        .current_dir(dir)
        .env_remove("CYCLECAP_OUT")
        .output()
        .unwrap()
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = cyclecap(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// A small dataset plus the flags for a training run that takes seconds.
fn small_run(dir: &Path) -> Vec<String> {
    ok(
        &[
            "gen-scenes",
            "--count",
            "8",
            "--seed",
            "3",
            "--out",
            "scenes.jsonl",
        ],
        dir,
    );
    [
        "--dataset",
        "scenes.jsonl",
        "--max-steps",
        "3",
        "--threads",
        "1",
        "--log-every",
        "0",
        "--set",
        "train.batch_size=4",
        "--set",
        "train.n_generations=4",
        "--set",
        "train.warm_start_steps=10",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn train(dir: &Path, extra: &[&str]) -> String {
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(small_run(dir));
    args.extend(extra.iter().map(|s| s.to_string()));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>(), dir)
}

#[test]
fn gen_scenes_single_record_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "gen-scenes",
            "--count",
            "1",
            "--seed",
            "7",
            "--out",
            "a.jsonl",
        ],
        dir.path(),
    );
    ok(
        &[
            "gen-scenes",
            "--count",
            "1",
            "--seed",
            "7",
            "--out",
            "b.jsonl",
        ],
        dir.path(),
    );
    let a = fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 2, "header plus one record");
    assert!(a.starts_with("cyclecap-scenes v1\n"));
    assert_eq!(a, fs::read_to_string(dir.path().join("b.jsonl")).unwrap());
}

#[test]
fn gen_scenes_rejects_zero_count_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = cyclecap(
        &["gen-scenes", "--count", "0", "--out", "none.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("none.jsonl").exists());
}

#[test]
fn gen_scenes_histogram_matches_recount() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(
        &[
            "gen-scenes",
            "--count",
            "200",
            "--seed",
            "11",
            "--out",
            "s.jsonl",
        ],
        dir.path(),
    );
    let text = fs::read_to_string(dir.path().join("s.jsonl")).unwrap();
    let records: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(records.len(), 200);
    let mut hist = [0usize; 6];
    let mut relations = 0;
    for r in &records {
        hist[r.matches("\"category\"").count()] += 1;
        relations += r.matches("\"subject\"").count();
    }
    for (k, n) in hist.iter().enumerate().skip(1) {
        assert!(stdout.contains(&format!("objects {k}: {n}\n")), "{stdout}");
    }
    assert!(
        stdout.contains(&format!("relations: {relations}\n")),
        "{stdout}"
    );
}

#[test]
fn render_caption_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "render-caption",
            "red small circle AT r2 c3",
            "--out",
            "x.ppm",
        ],
        dir.path(),
    );
    let got = fs::read(dir.path().join("x.ppm")).unwrap();
    let golden = fs::read(golden_dir().join("red_small_circle_r2_c3.ppm")).unwrap();
    assert!(got == golden, "render differs from the golden file");
}

#[test]
fn reward_of_canonical_caption_prints_one() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &[
            "gen-scenes",
            "--count",
            "1",
            "--seed",
            "7",
            "--out",
            "s.jsonl",
        ],
        dir.path(),
    );
    let scene = &load_dataset(&dir.path().join("s.jsonl"), 8).unwrap()[0];
    fs::write(
        dir.path().join("x.ppm"),
        render_scene(scene, &RendererConfig::exact()).to_ppm(),
    )
    .unwrap();
    let vocab = Vocab::new(8);
    let text = detokenize(&canonical_caption(scene, &vocab).unwrap(), &vocab);
    let stdout = ok(
        &[
            "reward",
            "x.ppm",
            &text,
            "--metric",
            "pixel",
            "--backend",
            "exact",
        ],
        dir.path(),
    );
    assert_eq!(stdout, "1.000000000000\n");
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ppm"), b"P6\n2 2\n255\nxx").unwrap();
    let out = cyclecap(
        &["reward", "bad.ppm", "circle", "--metric", "dreamsim"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let out = cyclecap(&["reward", "bad.ppm", "circle"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = cyclecap(&["reward", "missing.ppm", "circle"], dir.path());
    assert!(!out.status.success());
    let out = cyclecap(&["train", "--dataset", "missing.jsonl"], dir.path());
    assert!(!out.status.success());
}

#[test]
fn paper_preset_is_echoed_in_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(
        &["gen-scenes", "--count", "2", "--out", "s.jsonl"],
        dir.path(),
    );
    ok(
        &[
            "train",
            "--preset",
            "paper",
            "--dataset",
            "s.jsonl",
            "--out",
            "run",
            "--stop-after",
            "0",
            "--set",
            "train.warm_start_steps=0",
        ],
        dir.path(),
    );
    let text = fs::read_to_string(dir.path().join("run/config.resolved")).unwrap();
    for line in [
        "run.preset = paper",
        "train.beta = 0.04",
        "train.epsilon = 0.02",
        "train.n_generations = 8",
        "train.learning_rate = 0.00001",
        "train.batch_size = 64",
        "train.scheduler = linear",
    ] {
        assert!(
            text.lines().any(|l| l == line),
            "missing {line:?} in\n{text}"
        );
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_at_init() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--lr", "0", "--out", "run"]);
    let ck = |name: &str| Checkpoint::load(dir.path().join("run/checkpoints").join(name)).unwrap();
    let (init, fin) = (ck("init.ckpt"), ck("final.ckpt"));
    assert_eq!(fin.state.step, 3);
    assert_eq!(init.state.params, fin.state.params);
    let metrics = fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().count(),
        4,
        "rewards are logged for every step"
    );
}

#[test]
fn group_size_ablation_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = train(dir.path(), &["--ablate-n", "2,4,8", "--out", "abl"]);
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    let mut inputs = Vec::new();
    for n in [2, 4, 8] {
        let m = dir.path().join(format!("abl/n{n}/metrics.csv"));
        assert!(m.exists());
        inputs.push(m.display().to_string());
    }
    let mut args = vec!["plot", "--out", "tidy.csv"];
    args.extend(inputs.iter().map(String::as_str));
    ok(&args, dir.path());
    let tidy = fs::read_to_string(dir.path().join("tidy.csv")).unwrap();
    let mut lines = tidy.lines();
    assert_eq!(lines.next(), Some("n,step,mean_reward"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3 * 3);
    for (i, n) in [2, 4, 8].iter().enumerate() {
        for step in 0..3 {
            assert!(rows[i * 3 + step].starts_with(&format!("{n},{step},")));
        }
    }
}

#[test]
fn single_threaded_runs_are_byte_identical_and_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let outputs = || {
        let read = |p: &str| fs::read(dir.path().join("run").join(p)).unwrap();
        let files = (read("metrics.csv"), read("checkpoints/final.ckpt"));
        fs::remove_dir_all(dir.path().join("run")).unwrap();
        files
    };
    train(dir.path(), &["--out", "run"]);
    fs::copy(
        dir.path().join("run/config.resolved"),
        dir.path().join("again.cfg"),
    )
    .unwrap();
    let first = outputs();
    train(dir.path(), &["--out", "run"]);
    assert!(outputs() == first, "rerun differs");
    ok(
        &[
            "train",
            "--config",
            "again.cfg",
            "--threads",
            "1",
            "--log-every",
            "0",
        ],
        dir.path(),
    );
    assert!(outputs() == first, "run from config.resolved differs");
}

#[test]
fn eval_writes_per_image_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    train(dir.path(), &["--out", "run"]);
    let stdout = ok(
        &["eval", "--checkpoint", "run/checkpoints/final.ckpt"],
        dir.path(),
    );
    assert!(stdout.contains("unified score"), "{stdout}");
    let csv = fs::read_to_string(dir.path().join("run/eval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8 + 1);
    assert!(csv.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn output_directory_follows_environment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> = vec!["train".into()];
    args.extend(small_run(dir.path()));
    let out = Command::new(env!("CARGO_BIN_EXE_cyclecap"))
        .args(&args)
        .current_dir(dir.path())
        .env("CYCLECAP_OUT", "from_env")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("from_env/checkpoints/final.ckpt").exists());
}
