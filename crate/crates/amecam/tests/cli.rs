//! CLI surface tests: artifact layout, report/CSV schemas, overlay output,
//! and the error paths a user actually hits. Training subcommands run in the
//! acceptance suite; everything here finishes in seconds.

use amecam::cam::{write_cam, ActivationMap, MapSource};
use amecam::data::io::load_volume_dir;
use amecam::data::slice_volume;
use std::path::Path;
use std::process::{Command, Output};

fn amecam(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amecam"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn binary")
}

fn expect_ok(dir: &Path, args: &[&str]) -> String {
    let out = amecam(dir, args);
    assert!(
        out.status.success(),
        "`amecam {}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn expect_err(dir: &Path, args: &[&str]) -> String {
    let out = amecam(dir, args);
    assert!(!out.status.success(), "`amecam {}` unexpectedly succeeded", args.join(" "));
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth_small(dir: &Path) {
    expect_ok(
        dir,
        &["synth", "--cases", "3", "--dims", "8,32,32", "--tumor-frac", "1.0", "--seed", "3", "--out", "data"],
    );
}

#[test]
fn synth_writes_volumes_masks_and_sidecars() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = expect_ok(
        tmp.path(),
        &["synth", "--cases", "3", "--dims", "8,32,32", "--tumor-frac", "0.5", "--seed", "3", "--out", "data"],
    );
    assert!(stdout.contains("wrote 3 volumes"), "summary line missing: {stdout}");
    for case in ["case0000", "case0001", "case0002"] {
        assert!(tmp.path().join(format!("data/{case}.bin")).exists(), "{case}.bin");
        assert!(tmp.path().join(format!("data/{case}.json")).exists(), "{case}.json");
        assert!(tmp.path().join(format!("data/{case}.mask.bin")).exists(), "{case}.mask.bin");
    }
}

#[test]
fn synth_rejects_undersized_dims() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = expect_err(
        tmp.path(),
        &["synth", "--cases", "1", "--dims", "4,32,32", "--seed", "0", "--out", "data"],
    );
    assert!(stderr.contains("minimum"), "unexpected error text: {stderr}");
}

#[test]
fn manifest_covers_every_case_and_records_data_dir() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    expect_ok(
        tmp.path(),
        &["manifest", "--data", "data", "--ratios", "0.5,0.25,0.25", "--seed", "1", "--out", "m.json"],
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("m.json")).unwrap()).unwrap();
    let entries = doc["entries"].as_array().expect("entries array");
    assert_eq!(entries.len(), 3 * 8, "one entry per slice");
    let mut split_of = std::collections::HashMap::new();
    for e in entries {
        let case = e["case_id"].as_str().unwrap().to_owned();
        let split = e["split"].as_str().unwrap().to_owned();
        assert_eq!(
            split_of.entry(case).or_insert_with(|| split.clone()),
            &split,
            "split must be assigned per case, never per slice"
        );
    }
    assert_eq!(split_of.len(), 3, "every case appears");
    assert_eq!(doc["data_dir"], "data");
}

#[test]
fn manifest_rejects_ratios_that_do_not_sum_to_one() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    let stderr = expect_err(
        tmp.path(),
        &["manifest", "--data", "data", "--ratios", "0.5,0.5,0.5", "--seed", "1", "--out", "m.json"],
    );
    assert!(stderr.contains("ratio"), "unexpected error text: {stderr}");
}

#[test]
fn cam_requires_an_existing_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = expect_err(
        tmp.path(),
        &["cam", "--ckpt", "missing.ckpt", "--mode", "attentive", "--out", "cams"],
    );
    assert!(stderr.contains("missing.ckpt"), "unexpected error text: {stderr}");
}

#[test]
fn train_requires_an_existing_config() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = expect_err(
        tmp.path(),
        &["train-classifier", "--config", "nope.toml", "--ckpt-out", "c.ckpt"],
    );
    assert!(stderr.contains("nope.toml"), "unexpected error text: {stderr}");
}

#[test]
fn sweep_argument_is_validated_at_parse_time() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = expect_err(
        tmp.path(),
        &["eval", "--cams", "c", "--manifest", "m.json", "--threshold-sweep", "0.9:0.1:0.1"],
    );
    assert!(
        stderr.contains("threshold") || stderr.contains("sweep"),
        "unexpected error text: {stderr}"
    );
}

/// Hand-written "perfect" maps (the ground-truth masks themselves) pushed
/// through `eval` and `overlay`: checks report and CSV schemas, sweep
/// selection, and overlay artifacts without any training.
#[test]
fn eval_and_overlay_on_perfect_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_small(dir);
    expect_ok(
        dir,
        &["manifest", "--data", "data", "--ratios", "0.4,0.3,0.3", "--seed", "1", "--out", "m.json"],
    );

    let volumes = load_volume_dir::<f32>(&dir.join("data")).unwrap();
    let mut n_written = 0;
    for vol in &volumes {
        for slice in slice_volume(vol).unwrap() {
            if slice.label == 0 {
                continue;
            }
            let mask = slice.gt_mask.as_ref().unwrap();
            let map = ActivationMap::<f32> {
                values: mask.mapv(|v| v as f32),
                source: MapSource::Attentive,
                native_resolution: mask.dim(),
            };
            write_cam(&dir.join("cams"), &slice.case_id, slice.z_index, &map).unwrap();
            n_written += 1;
        }
    }
    assert!(n_written > 0, "synthetic set produced no tumor slices");

    let stdout = expect_ok(
        dir,
        &["eval", "--cams", "cams", "--manifest", "m.json", "--threshold", "0.5",
          "--threshold-sweep", "0.3:0.7:0.2", "--report", "r.json", "--csv", "r.csv"],
    );
    assert!(stdout.contains("evaluated"), "missing summary line: {stdout}");

    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(doc["n_evaluated"].as_u64().unwrap(), n_written as u64);
    assert_eq!(doc["summary"]["dice"]["mean"].as_f64().unwrap(), 1.0);
    assert_eq!(doc["summary"]["hd95"]["mean"].as_f64().unwrap(), 0.0);
    let sweep = doc["sweep"]["per_threshold"].as_array().expect("sweep rows");
    assert_eq!(sweep.len(), 3);
    assert_eq!(doc["sweep"]["best"]["dice_mean"].as_f64().unwrap(), 1.0);

    let csv = std::fs::read_to_string(dir.join("r.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("case_id,z_index,dice,iou,hd95"));
    assert_eq!(lines.count(), n_written);

    expect_ok(dir, &["overlay", "--cams", "cams", "--images", "data", "--out", "ov"]);
    let pngs = std::fs::read_dir(dir.join("ov"))
        .unwrap()
        .filter(|e| {
            e.as_ref().unwrap().path().extension().map(|x| x == "png").unwrap_or(false)
        })
        .count();
    assert_eq!(pngs, n_written, "one overlay image per exported map");
}
