//! End-to-end checks of the `mtnet` binary: exit codes, diagnostics, and the
//! determinism of artifacts on disk. Heavy training flows live in the
//! acceptance suite; everything here runs in seconds.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtnet_core::data::read_manifest;
use mtnet_core::detection::SegmentationMap;

fn mtnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mtnet"))
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn mtnet binary")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Byte-compare two directories: same file names, same contents.
fn assert_dirs_identical(a: &Path, b: &Path) {
    let list = |d: &Path| -> Vec<String> {
        let mut names: Vec<String> = fs::read_dir(d)
            .expect("readable dir")
            .map(|e| e.expect("dir entry").file_name().into_string().expect("utf8 name"))
            .collect();
        names.sort();
        names
    };
    let (la, lb) = (list(a), list(b));
    assert_eq!(la, lb, "directories {} and {} hold different files", a.display(), b.display());
    for name in &la {
        let (ba, bb) = (fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        assert_eq!(ba, bb, "file {name} differs between the two runs");
    }
}

#[test]
fn params_prints_the_arch1_count() {
    let out = run(mtnet().args(["params", "--arch", "arch1"]));
    assert!(out.status.success(), "params failed: {}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "27289");
}

#[test]
fn params_rejects_an_unknown_architecture() {
    let out = run(mtnet().args(["params", "--arch", "arch9"]));
    assert!(!out.status.success(), "expected nonzero exit for unknown arch");
    let err = stderr(&out);
    assert!(err.contains("arch9"), "diagnostic should name the offender: {err}");
    assert_eq!(err.trim().lines().count(), 1, "diagnostic should be one line: {err}");
}

#[test]
fn synth_same_seed_yields_byte_identical_directories() {
    let (t1, t2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = [
        "synth", "--out", "data", "--seed", "7", "--scenes", "2", "--size", "128x128",
        "--crowns", "1", "--pairs", "1", "--distractors", "1", "--radius-min", "8",
        "--radius-max", "10",
    ];
    // Run from two different working directories with the same relative --out,
    // so even the provenance records must match byte for byte.
    let o1 = run(mtnet().args(args).current_dir(t1.path()));
    assert!(o1.status.success(), "first synth failed: {}", stderr(&o1));
    let o2 = run(mtnet().args(args).current_dir(t2.path()));
    assert!(o2.status.success(), "second synth failed: {}", stderr(&o2));
    assert_dirs_identical(&t1.path().join("data"), &t2.path().join("data"));

    let entries = read_manifest(&t1.path().join("data/manifest.txt")).unwrap();
    assert_eq!(entries.len(), 2, "manifest should list one row per scene");
}

#[test]
fn config_file_values_match_flags_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.cfg");
    fs::write(&cfg, "seed=5\nscenes=1\nsize=96x96\ncrowns=1\npairs=0\ndistractors=0\n").unwrap();
    let base = |out: &str| -> Vec<String> {
        vec![
            "synth".into(), "--out".into(), tmp.path().join(out).display().to_string(),
            "--config".into(), cfg.display().to_string(),
        ]
    };

    let o1 = run(mtnet().args(base("from_file")));
    assert!(o1.status.success(), "config-file synth failed: {}", stderr(&o1));
    let o2 = run(mtnet().args([
        "synth", "--out", &tmp.path().join("from_flags").display().to_string(),
        "--seed", "5", "--scenes", "1", "--size", "96x96", "--crowns", "1",
        "--pairs", "0", "--distractors", "0",
    ]));
    assert!(o2.status.success(), "flag synth failed: {}", stderr(&o2));
    assert_eq!(
        fs::read(tmp.path().join("from_file/scene_000.ppm")).unwrap(),
        fs::read(tmp.path().join("from_flags/scene_000.ppm")).unwrap(),
        "file-sourced settings should generate the same scene as flags"
    );

    let mut with_override = base("overridden");
    with_override.extend(["--seed".into(), "9".into()]);
    let o3 = run(mtnet().args(with_override));
    assert!(o3.status.success(), "override synth failed: {}", stderr(&o3));
    assert_ne!(
        fs::read(tmp.path().join("from_file/scene_000.ppm")).unwrap(),
        fs::read(tmp.path().join("overridden/scene_000.ppm")).unwrap(),
        "a flag must override the config-file seed"
    );
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    fs::write(&cfg, "sede=5\n").unwrap();
    let out = run(mtnet().args([
        "synth", "--out", &tmp.path().join("d").display().to_string(),
        "--config", &cfg.display().to_string(),
    ]));
    assert!(!out.status.success(), "expected nonzero exit for unknown key");
    assert!(stderr(&out).contains("sede"), "diagnostic should name the key: {}", stderr(&out));
}

#[test]
fn eval_pixel_scores_ground_truth_against_itself_as_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let o = run(mtnet().args([
        "synth", "--out", &data.display().to_string(), "--seed", "3", "--scenes", "1",
        "--size", "128x128", "--crowns", "2", "--pairs", "0", "--distractors", "1",
        "--radius-min", "9", "--radius-max", "12",
    ]));
    assert!(o.status.success(), "synth failed: {}", stderr(&o));

    // Re-encode the ground truth as a class-index map and score it against the
    // annotation it came from: every metric must be exactly 1.
    let gt_path = data.join("scene_000_gt.ppm");
    let rgb = mtnet_core::data::read_ppm(&gt_path).unwrap();
    let (_, _, seg): (_, _, SegmentationMap) = mtnet_core::data::decode_ground_truth(&rgb).unwrap();
    let pred_path = tmp.path().join("pred.pgm");
    mtnet_core::data::write_pgm(&pred_path, &seg.to_gray()).unwrap();

    let out_csv = tmp.path().join("metrics.csv");
    let o = run(mtnet().args([
        "eval", "--mode", "pixel", "--pred", &pred_path.display().to_string(),
        "--truth", &gt_path.display().to_string(), "--out", &out_csv.display().to_string(),
    ]));
    assert!(o.status.success(), "eval failed: {}", stderr(&o));
    let csv = fs::read_to_string(&out_csv).unwrap();
    assert!(
        csv.contains(",1.0000,1.0000,1.0000,"),
        "self-comparison should be perfect, got:\n{csv}"
    );
}

#[test]
fn detect_reports_a_missing_model_file_on_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(mtnet().args([
        "detect", "--model", &tmp.path().join("nope.bin").display().to_string(),
        "--image", &tmp.path().join("nope.ppm").display().to_string(),
        "--out-prefix", &tmp.path().join("d").display().to_string(),
        "--mode", "two_class",
    ]));
    assert!(!out.status.success(), "expected nonzero exit for missing model");
    let err = stderr(&out);
    assert!(err.starts_with("error:"), "diagnostic should start with error: {err}");
    assert!(err.contains("nope.bin"), "diagnostic should name the path: {err}");
}
