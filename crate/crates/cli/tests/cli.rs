use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use slwsr::imageio::write_png;
use slwsr::model::checkpoint;
use slwsr::{Model, ModelConfig, Shape, Tensor};

fn slwsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slwsr"))
        .args(args)
        .env_remove("SLWSR_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/train")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_checkpoint(dir: &Path) -> PathBuf {
    let model = Model::<f32>::new(
        ModelConfig {
            n_feats: 4,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let path = dir.join("small.ckpt");
    checkpoint::save(&path, &model, 0, None).unwrap();
    path
}

fn test_image(h: usize, w: usize, k: usize) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| ((c * 50 + y * 7 + x * 3 + k * 11) % 256) as f32 / 255.0)
}

const SMOKE: &[&str] = &["--n-feats", "4", "--batch-size", "2", "--patch", "16"];

fn train(out: &Path, seed: &str, steps: &str) -> Output {
    let data = fixtures();
    let mut args = vec!["train", "--data", s(&data), "--out", s(out)];
    args.extend_from_slice(SMOKE);
    args.extend_from_slice(&["--steps", steps, "--seed", seed]);
    slwsr(&args)
}

#[test]
fn train_rejects_missing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_such_dir");
    let o = slwsr(&["train", "--data", s(&missing), "--out", s(dir.path()), "--steps", "1"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("no_such_dir"));
}

#[test]
fn train_smoke_writes_one_log_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), "3", "10");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("step,epoch,lr,loss"));
    assert_eq!(lines.count(), 10);
    assert!(dir.path().join("final.ckpt").is_file());
    // the resolved configuration is logged
    assert!(stderr(&o).contains("n_feats = 4"));
}

#[test]
fn train_is_deterministic_under_a_fixed_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (d, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let o = train(d.path(), seed, "3");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("final.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn eval_rejects_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ck = small_checkpoint(dir.path());
    let mut bytes = fs::read(&ck).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&ck, bytes).unwrap();
    let o = slwsr(&["eval", "--checkpoint", s(&ck), "--dataset", s(&fixtures())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("magic"));
}

#[test]
fn eval_rejects_mismatched_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let ck = small_checkpoint(dir.path());
    let cfg = dir.path().join("arch.cfg");
    fs::write(&cfg, "n_feats = 8\n").unwrap();
    let o = slwsr(&["eval", "--checkpoint", s(&ck), "--config", s(&cfg), "--dataset", s(&fixtures())]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn eval_missing_dataset_without_root() {
    let o = slwsr(&["eval", "--bicubic", "--dataset", "Set5"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn eval_bicubic_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let o = slwsr(&[
        "eval",
        "--bicubic",
        "--dataset",
        s(&fixtures()),
        "--out",
        s(dir.path()),
        "--crops",
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().contains("astronaut"));
    assert!(dir.path().join("coffee_compare.png").is_file());
    assert!(stdout(&o).contains("mean"));
}

#[test]
fn ensemble_of_equivariant_model_reports_the_same_scores() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::pixel_replicator(
        ModelConfig {
            n_feats: 4,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let ck = dir.path().join("nn.ckpt");
    checkpoint::save(&ck, &model, 0, None).unwrap();
    let run = |ensemble: bool, out: &str| {
        let out = dir.path().join(out);
        let data = fixtures();
        let mut args = vec!["eval", "--checkpoint", s(&ck), "--dataset", s(&data), "--out", s(&out)];
        if ensemble {
            args.push("--ensemble");
        }
        let o = slwsr(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        // drop the ensemble column before comparing
        fs::read_to_string(out.join("report.csv"))
            .unwrap()
            .lines()
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                format!("{},{},{}", f[4], f[5], f[6])
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(false, "single"), run(true, "ensemble"));
}

#[test]
fn infer_upscales_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let ck = small_checkpoint(dir.path());
    let input = dir.path().join("in.png");
    write_png(&input, &test_image(48, 48, 0)).unwrap();
    let out = dir.path().join("out");
    let o = slwsr(&["infer", "--checkpoint", s(&ck), "--input", s(&input), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let produced = out.join("in_x4.png");
    let img = slwsr::imageio::read_png(&produced).unwrap();
    assert_eq!(img.shape(), Shape::new(1, 3, 192, 192));
    let first = fs::read(&produced).unwrap();
    let o = slwsr(&["infer", "--checkpoint", s(&ck), "--input", s(&input), "--output", s(&out)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&produced).unwrap(), first);
}

#[test]
fn infer_processes_each_png_of_a_directory_once() {
    let dir = tempfile::tempdir().unwrap();
    let ck = small_checkpoint(dir.path());
    let inputs = dir.path().join("inputs");
    for k in 0..3 {
        write_png(&inputs.join(format!("img{k}.png")), &test_image(12, 10 + k, k)).unwrap();
    }
    fs::write(inputs.join("notes.txt"), "not an image").unwrap();
    let out = dir.path().join("out");
    let o = slwsr(&["infer", "--checkpoint", s(&ck), "--input", s(&inputs), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["img0_x4.png", "img1_x4.png", "img2_x4.png"]);
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn infer_rejects_unreadable_image() {
    let dir = tempfile::tempdir().unwrap();
    let ck = small_checkpoint(dir.path());
    let bad = dir.path().join("bad.png");
    fs::write(&bad, b"garbage").unwrap();
    let o = slwsr(&["infer", "--checkpoint", s(&ck), "--input", s(&bad), "--output", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_by_default() {
    let o = slwsr(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for op in ["conv2d", "depthwise_conv2d", "pixel_shuffle", "basic_block", "bunch", "pool"] {
        assert!(out.lines().any(|l| l.starts_with(op) && l.ends_with("ok")), "{op} missing:\n{out}");
    }
}

#[test]
fn gradcheck_catches_an_injected_conv_fault() {
    let o = slwsr(&["gradcheck", "--inject-fault", "conv2d"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("conv2d"));
    assert!(stdout(&o).lines().any(|l| l.starts_with("conv2d") && l.ends_with("FAIL")));
}

#[test]
fn gradcheck_op_filter() {
    let o = slwsr(&["gradcheck", "--op", "pixel_shuffle"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    assert!(out.starts_with("pixel_shuffle"));
    let o = slwsr(&["gradcheck", "--op", "softmax"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn count_reports_parameters() {
    let o = slwsr(&["count", "--widths", "16,32,64", "--csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("b16,1280,720,143955,"));
    let o = slwsr(&["count", "--sweep"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn help_lists_flags_and_unknown_flags_fail() {
    let o = slwsr(&["gradcheck", "--help"]);
    assert!(stdout(&o).contains("--inject-fault"));
    let o = slwsr(&["--help"]);
    assert!(stdout(&o).contains("Exit codes"));
    let o = slwsr(&["count", "--bogus"]);
    assert_eq!(code(&o), 2);
}
