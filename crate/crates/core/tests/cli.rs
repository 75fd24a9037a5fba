use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cpcad::metrics::MetricsReport;
use image::{GrayImage, Luma, RgbImage};
use tempfile::TempDir;

const TINY: &str = r#"
seed = 5
output_dir = "run"

[dataset]
root = "data"
class = "synth-tiny"

[dataset.synthetic]
texture_kind = "checker"
defect_kind = "rectangle-blot"
defect_size_range = [0.2, 0.3]
n_train = 4
n_test_normal = 2
n_test_anomalous = 2

[grid]
image_side = 64
patch_side = 32
patch_stride = 16
subpatch_side = 16
subpatch_stride = 8

[encoder]
backbone = "small-cnn"
embedding_dim = 8
input_side = 16

[train]
epochs = 2
batch_size = 2
learning_rate = 1e-3
negatives = 4
offsets = [2]
checkpoint_every = 1

[scoring]
offsets = [2]
negatives = 4
bank_size = 200
"#;

fn cpcad(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpcad"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap().trim().to_string()
}

fn workspace(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

fn count_files(dir: &Path, ext: &str) -> usize {
    fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == ext))
                .count()
        })
        .unwrap_or(0)
}

#[test]
fn synth_data_writes_mvtec_layout() {
    let ws = workspace(TINY);
    let class_dir = PathBuf::from(ok(cpcad(ws.path(), &["synth-data", "--config", "run.toml"])));
    let class_dir = ws.path().join(class_dir);
    assert_eq!(count_files(&class_dir.join("train/good"), "png"), 4);
    assert_eq!(count_files(&class_dir.join("test/good"), "png"), 2);
    assert_eq!(count_files(&class_dir.join("test/rectangle-blot"), "png"), 2);
    assert_eq!(count_files(&class_dir.join("ground_truth/rectangle-blot"), "png"), 2);
    assert!(class_dir.join("run_config.toml").is_file());
}

#[test]
fn empty_training_set_is_a_config_error() {
    let ws = workspace(&TINY.replace("n_train = 4", "n_train = 0"));
    let out = cpcad(ws.path(), &["synth-data", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_train"));
}

#[test]
fn bad_geometry_is_rejected_before_work() {
    let ws = workspace(&TINY.replace("patch_stride = 16", "patch_stride = 20"));
    let out = cpcad(ws.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!ws.path().join("run").exists());
}

#[test]
fn missing_config_file_exits_nonzero() {
    let ws = tempfile::tempdir().unwrap();
    let out = cpcad(ws.path(), &["train", "--config", "nope.toml"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let ws = workspace(TINY);
    ok(cpcad(ws.path(), &["synth-data", "--config", "run.toml"]));
    ok(cpcad(ws.path(), &["train", "--config", "run.toml", "--out", "straight"]));
    ok(cpcad(ws.path(), &["train", "--config", "run.toml", "--out", "split", "--epochs", "1"]));
    ok(cpcad(
        ws.path(),
        &["train", "--config", "run.toml", "--out", "split", "--bundle", "split/model.cpcad"],
    ));
    let a = fs::read(ws.path().join("straight/model.cpcad")).unwrap();
    let b = fs::read(ws.path().join("split/model.cpcad")).unwrap();
    assert!(a == b, "resumed bundle differs from the uninterrupted one");
    let losses = fs::read_to_string(ws.path().join("split/train_loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 3);

    let other = ws.path().join("other.toml");
    fs::write(&other, TINY.replace("learning_rate = 1e-3", "learning_rate = 2e-3")).unwrap();
    let out = cpcad(
        ws.path(),
        &["train", "--config", "other.toml", "--out", "split", "--bundle", "split/model.cpcad"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn scoring_is_deterministic_and_writes_artifacts() {
    let ws = workspace(TINY);
    ok(cpcad(ws.path(), &["synth-data", "--config", "run.toml"]));
    ok(cpcad(ws.path(), &["train", "--config", "run.toml"]));
    let score = |out: &str| {
        let dir = ok(cpcad(
            ws.path(),
            &["score", "--config", "run.toml", "--bundle", "run/model.cpcad", "--out", out],
        ));
        ws.path().join(dir)
    };
    let a = score("a");
    let b = score("b");
    let csv_a = fs::read(a.join("scores.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("scores.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&csv_a).lines().count(), 5);
    let masks = a.join("masks/synth-tiny/rectangle-blot");
    assert_eq!(count_files(&masks, "f32"), 2);
    assert_eq!(count_files(&masks, "png"), 2);
    assert_eq!(fs::metadata(masks.join("000.f32")).unwrap().len(), 64 * 64 * 4);
    assert!(a.join("masks/normalization.json").is_file());
    assert!(a.join("run_config.toml").is_file());

    ok(cpcad(
        ws.path(),
        &[
            "evaluate",
            "--scores",
            a.join("scores.csv").to_str().unwrap(),
            "--masks",
            a.join("masks").to_str().unwrap(),
            "--gt",
            "data",
            "--out",
            "eval",
        ],
    ));
    let report: MetricsReport =
        serde_json::from_slice(&fs::read(ws.path().join("eval/metrics.json")).unwrap()).unwrap();
    let class = &report.classes["synth-tiny"];
    assert_eq!((class.n_normal, class.n_anomalous), (2, 2));
    assert!(class.pixel_auroc.is_some());

    let out = cpcad(
        ws.path(),
        &["score", "--config", "run.toml", "--bundle", "run/missing.cpcad", "--out", "c"],
    );
    assert_eq!(out.status.code(), Some(3));
}

/// Writes one class of hand-made heatmaps and masks: `normal` images get
/// `normal_value`, anomalous images get their mask scaled by `hit` plus
/// `normal_value`.
fn fixture(root: &Path, class: &str, scores: &[(bool, f64)], normal_value: f32, hit: f32) -> String {
    let side = 8usize;
    let mut csv = String::new();
    for (i, &(anomalous, score)) in scores.iter().enumerate() {
        let (category, label) = if anomalous { ("crack", "anomalous") } else { ("good", "normal") };
        let stem = format!("{i:03}");
        let id = format!("{class}/{category}/{stem}");
        csv.push_str(&format!("{id},{label},{score}\n"));
        let mut gt = GrayImage::new(side as u32, side as u32);
        if anomalous {
            for y in 2..5 {
                for x in 1..4 + i % 3 {
                    gt.put_pixel(x as u32, y, Luma([255]));
                }
            }
            let path = root.join(class).join("ground_truth").join(category).join(format!("{stem}_mask.png"));
            fs::create_dir_all(path.parent().unwrap()).unwrap();
            gt.save(&path).unwrap();
        }
        let raw: Vec<u8> = gt
            .pixels()
            .flat_map(|p| (normal_value + hit * (p.0[0] > 0) as u8 as f32).to_le_bytes())
            .collect();
        let path = root.join("masks").join(class).join(category).join(format!("{stem}.f32"));
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, raw).unwrap();
    }
    csv
}

fn evaluate(root: &Path, csv: &str, extra: &[&str]) -> MetricsReport {
    fs::write(root.join("scores.csv"), format!("image_id,label,score\n{csv}")).unwrap();
    let mut args = vec!["evaluate", "--scores", "scores.csv", "--masks", "masks", "--gt", ".", "--out", "eval"];
    args.extend_from_slice(extra);
    ok(cpcad(root, &args));
    serde_json::from_slice(&fs::read(root.join("eval/metrics.json")).unwrap()).unwrap()
}

#[test]
fn perfect_fixture_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let csv = fixture(
        dir.path(),
        "carpet",
        &[(false, 0.1), (false, 0.2), (true, 0.8), (true, 0.9)],
        0.0,
        1.0,
    );
    let report = evaluate(dir.path(), &csv, &[]);
    let c = &report.classes["carpet"];
    assert_eq!(c.detection_auroc, 1.0);
    assert_eq!(c.pixel_auroc, Some(1.0));
    assert_eq!(report.pixel_auroc_mode, "pooled");
}

#[test]
fn constant_fixture_scores_one_half() {
    let dir = tempfile::tempdir().unwrap();
    let csv = fixture(
        dir.path(),
        "grid",
        &[(false, 0.5), (true, 0.5), (false, 0.5), (true, 0.5)],
        0.3,
        0.0,
    );
    let report = evaluate(dir.path(), &csv, &["--per-image-mean"]);
    let c = &report.classes["grid"];
    assert_eq!(c.detection_auroc, 0.5);
    assert_eq!(c.pixel_auroc, Some(0.5));
    assert_eq!(report.pixel_auroc_mode, "per_image_mean");
}

#[test]
fn rollups_match_per_class_values() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = fixture(dir.path(), "carpet", &[(false, 0.1), (true, 0.9)], 0.0, 1.0);
    csv += &fixture(dir.path(), "wood", &[(false, 0.5), (true, 0.5), (true, 0.6)], 0.2, 0.0);
    csv += &fixture(dir.path(), "bottle", &[(false, 0.7), (true, 0.2), (false, 0.1)], 0.0, 1.0);
    let report = evaluate(dir.path(), &csv, &[]);
    let det = |c: &str| report.classes[c].detection_auroc;
    let pix = |c: &str| report.classes[c].pixel_auroc.unwrap();
    let close = |a: Option<f64>, b: f64| (a.unwrap() - b).abs() < 1e-12;

    assert_eq!(det("bottle"), 0.5);
    assert_eq!(det("wood"), 0.75);
    assert_eq!(report.mean.classes, 3);
    assert!(close(report.mean.detection_auroc, (det("carpet") + det("wood") + det("bottle")) / 3.0));
    assert!(close(report.mean.pixel_auroc, (pix("carpet") + pix("wood") + pix("bottle")) / 3.0));
    assert_eq!(report.texture_mean.classes, 2);
    assert!(close(report.texture_mean.detection_auroc, (det("carpet") + det("wood")) / 2.0));
    assert_eq!(report.object_mean.classes, 1);
    assert!(close(report.object_mean.pixel_auroc, pix("bottle")));
}

#[test]
fn evaluate_reports_missing_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let csv = fixture(dir.path(), "tile", &[(false, 0.1), (true, 0.9)], 0.0, 1.0);
    fs::remove_dir_all(dir.path().join("tile/ground_truth")).unwrap();
    fs::write(dir.path().join("scores.csv"), format!("image_id,label,score\n{csv}")).unwrap();
    let out = cpcad(
        dir.path(),
        &["evaluate", "--scores", "scores.csv", "--masks", "masks", "--gt", ".", "--out", "eval"],
    );
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("001_mask.png"));
}

#[test]
fn visualize_panel_widths() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    GrayImage::from_fn(20, 20, |x, y| Luma([(x * 10 + y) as u8])).save(p.join("img.png")).unwrap();
    GrayImage::from_fn(20, 20, |x, _| Luma([if x > 10 { 255 } else { 0 }])).save(p.join("gt.png")).unwrap();
    let heat: Vec<u8> = (0..400).flat_map(|i| (i as f32 / 400.0).to_le_bytes()).collect();
    fs::write(p.join("heat.f32"), heat).unwrap();

    ok(cpcad(p, &["visualize", "--image", "img.png", "--mask", "heat.f32", "--gt", "gt.png", "--out", "three.png"]));
    let three: RgbImage = image::open(p.join("three.png")).unwrap().to_rgb8();
    assert_eq!(three.dimensions(), (60, 20));

    ok(cpcad(p, &["visualize", "--image", "img.png", "--mask", "heat.f32", "--out", "two.png"]));
    assert_eq!(image::open(p.join("two.png")).unwrap().to_rgb8().dimensions(), (40, 20));

    GrayImage::new(16, 16).save(p.join("small.png")).unwrap();
    let out = cpcad(p, &["visualize", "--image", "img.png", "--mask", "small.png", "--out", "bad.png"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!p.join("bad.png").exists());
}

#[test]
fn committed_configs_resolve() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["acceptance_synth.toml", "mvtec_full.toml"] {
        cpcad::config::RunConfig::load(&dir.join(name))
            .and_then(|c| c.resolve())
            .unwrap_or_else(|e| panic!("{name}: {e}"));
    }
}
