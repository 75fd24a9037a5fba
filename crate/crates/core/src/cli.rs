//! The commands behind the `cpcad` binary. Each writes its artifacts plus a
//! copy of the resolved run config into its output directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_bundle, save_bundle};
use crate::config::RunConfig;
use crate::dataset::{generate_synthetic, load_mvtec_class, write_mvtec_layout, DatasetSplit, Label, LoadOptions};
use crate::error::{CpcError, Result};
use crate::metrics::{auroc, pixel_auroc, pixel_auroc_per_image_mean, ClassMetrics, MetricsReport};
use crate::raster::{read_gray, read_mask, resize_mask, save_png, BinaryMask};
use crate::scoring::{build_negative_bank, image_score, image_seed, make_mask, score_image, AnomalyMask, ScoreMap};
use crate::trainer::{continue_training, ModelBundle};

pub const BUNDLE_FILE: &str = "model.cpcad";
pub const LOSS_FILE: &str = "train_loss.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Test,
    Train,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CpcError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CpcError::io(path, e))
}

/// Writes the configured synthetic dataset as an MVTec-style class folder
/// under `out` and returns the class directory.
pub fn cmd_synth_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let synth = cfg
        .synthetic()
        .ok_or_else(|| CpcError::Config("dataset.synthetic section is missing".into()))?;
    let split = generate_synthetic(&synth, cfg.grid.image_side)?.renamed(&cfg.dataset.class);
    let class_dir = write_mvtec_layout(&split, out)?;
    cfg.archive(&class_dir)?;
    Ok(class_dir)
}

pub fn load_split(cfg: &RunConfig) -> Result<DatasetSplit> {
    load_mvtec_class(
        &cfg.dataset.root,
        &cfg.dataset.class,
        LoadOptions {
            image_side: cfg.grid.image_side,
            interpolation: cfg.dataset.interpolation,
        },
    )
}

fn write_loss_csv(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch".to_string()];
    header.extend(bundle.units.iter().map(|u| {
        u.directions()
            .iter()
            .map(|d| d.name())
            .collect::<Vec<_>>()
            .join("+")
    }));
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in bundle.loss_history.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|l| l.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    write_file(path, w.into_inner().map_err(|e| CpcError::Config(e.to_string()))?)
}

fn csv_err(e: csv::Error) -> CpcError {
    CpcError::Config(format!("csv: {e}"))
}

/// Trains (or resumes `resume`) and writes the bundle and loss table into
/// `cfg.output_dir`. Returns the bundle path.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let out = &cfg.output_dir;
    let split = load_split(cfg)?;
    let mut bundle = match resume {
        Some(path) => {
            let mut b = load_bundle(path)?;
            let mut expected = cfg.train.clone();
            expected.epochs = b.train_config.epochs;
            if b.class_name != cfg.dataset.class
                || b.grid != cfg.grid
                || b.encoder_config != cfg.encoder
                || b.train_config != expected
            {
                return Err(CpcError::Config(format!(
                    "{} was trained with a different configuration",
                    path.display()
                )));
            }
            b.train_config.epochs = cfg.train.epochs;
            tracing::info!(from = b.epochs_completed, to = cfg.train.epochs, "resuming");
            b
        }
        None => ModelBundle::new(&cfg.dataset.class, cfg.grid, cfg.encoder, cfg.train.clone())?,
    };
    cfg.archive(out)?;
    let bundle_path = out.join(BUNDLE_FILE);
    let loss_path = out.join(LOSS_FILE);
    let every = cfg.train.checkpoint_every.max(1);
    let total = cfg.train.epochs;
    continue_training(&mut bundle, &split, &mut |b| {
        if b.epochs_completed % every == 0 || b.epochs_completed == total {
            save_bundle(b, &bundle_path)?;
            write_loss_csv(b, &loss_path)?;
        }
        Ok(())
    })?;
    if !bundle_path.exists() {
        save_bundle(&bundle, &bundle_path)?;
        write_loss_csv(&bundle, &loss_path)?;
    }
    Ok(bundle_path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub image_id: String,
    pub label: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Raw heatmap value mapped to 0.
    pub min: f64,
    /// Raw heatmap value mapped to 65535.
    pub max: f64,
    pub levels: u32,
}

#[derive(Serialize)]
struct ScoreMapFile<'a> {
    side: usize,
    values: &'a [f64],
    counts: &'a [u32],
}

/// Scores one split. Writes `scores.csv`, per-image score maps, raw and
/// 16-bit heatmaps plus their normalization under `<output_dir>/scores_<split>`,
/// and returns that directory.
pub fn cmd_score(cfg: &RunConfig, bundle_path: &Path, which: SplitName) -> Result<PathBuf> {
    let bundle = load_bundle(bundle_path)?;
    if bundle.grid != cfg.grid || bundle.encoder_config != cfg.encoder {
        return Err(CpcError::Config("bundle geometry or encoder differs from the run config".into()));
    }
    let split = load_split(cfg)?;
    let out = cfg.output_dir.join(match which {
        SplitName::Test => "scores_test",
        SplitName::Train => "scores_train",
    });
    cfg.archive(&out)?;
    let bank = build_negative_bank(&split.train, &bundle, cfg.scoring.bank_size, cfg.seed)?;
    let layout = bundle.layout()?;
    let params = cfg.scoring.params();
    let samples = match which {
        SplitName::Test => &split.test,
        SplitName::Train => &split.train,
    };
    let mut rows = Vec::with_capacity(samples.len());
    let mut masks: Vec<(String, AnomalyMask)> = Vec::with_capacity(samples.len());
    for sample in samples {
        let id = sample.image_id();
        let map = score_image(&sample.pixels, &bundle, &bank, &params, image_seed(cfg.seed, &id))?;
        let score = image_score(&map, cfg.scoring.top_fraction)?;
        tracing::debug!(image = %id, score, "scored");
        write_score_map(&map, &out.join("maps").join(format!("{id}.json")))?;
        masks.push((id.clone(), make_mask(&map, &layout)?));
        rows.push(ScoreRow {
            image_id: id,
            label: sample.label.as_str().to_string(),
            score,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    write_file(&out.join(SCORES_FILE), w.into_inner().map_err(|e| CpcError::Config(e.to_string()))?)?;
    write_masks(&masks, &out.join("masks"))?;
    Ok(out)
}

fn write_score_map(map: &ScoreMap, path: &Path) -> Result<()> {
    let body = serde_json::to_string(&ScoreMapFile {
        side: map.side,
        values: &map.values,
        counts: &map.counts,
    })
    .map_err(|e| CpcError::Config(e.to_string()))?;
    write_file(path, body)
}

/// Raw `f32` heatmaps plus 16-bit PNGs normalized over the whole set.
pub fn write_masks(masks: &[(String, AnomalyMask)], dir: &Path) -> Result<()> {
    let (lo, hi) = masks
        .iter()
        .flat_map(|(_, m)| m.values.iter().copied())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = if hi > lo { hi - lo } else { 1.0 };
    for (id, m) in masks {
        let raw: Vec<u8> = m.values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        write_file(&dir.join(format!("{id}.f32")), raw)?;
        let levels: Vec<u16> = m
            .values
            .iter()
            .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16)
            .collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(m.width as u32, m.height as u32, levels).expect("sized from mask");
        save_png(buf, &dir.join(format!("{id}.png")))?;
    }
    let norm = Normalization {
        min: lo,
        max: hi,
        levels: 65535,
    };
    write_file(
        &dir.join(NORMALIZATION_FILE),
        serde_json::to_string_pretty(&norm).map_err(|e| CpcError::Config(e.to_string()))?,
    )
}

/// Reads a raw `f32` heatmap; the image must be square.
pub fn read_raw_mask(path: &Path) -> Result<AnomalyMask> {
    let bytes = fs::read(path).map_err(|e| CpcError::io(path, e))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let side = (values.len() as f64).sqrt().round() as usize;
    if bytes.len() % 4 != 0 || side * side != values.len() || side == 0 {
        return Err(CpcError::Shape(format!("{} is not a square f32 heatmap", path.display())));
    }
    Ok(AnomalyMask {
        height: side,
        width: side,
        values,
    })
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CpcError::io(path, io),
        other => CpcError::Config(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize()
        .map(|row| row.map_err(|e| CpcError::Config(format!("{}: {e}", path.display()))))
        .collect()
}

/// Ground truth for `<class>/<category>/<stem>`; defect-free images get an
/// empty mask.
fn ground_truth(gt_root: &Path, image_id: &str, label: Label, height: usize, width: usize) -> Result<BinaryMask> {
    if label == Label::Normal {
        return Ok(BinaryMask::zeros(height, width));
    }
    let parts: Vec<&str> = image_id.splitn(3, '/').collect();
    let [class, category, stem] = parts[..] else {
        return Err(CpcError::Config(format!("malformed image id `{image_id}`")));
    };
    let path = gt_root
        .join(class)
        .join("ground_truth")
        .join(category)
        .join(format!("{stem}_mask.png"));
    if !path.is_file() {
        return Err(CpcError::MissingMask {
            image: image_id.into(),
            expected: path,
        });
    }
    Ok(resize_mask(&read_mask(&path)?, height, width))
}

/// Computes per-class detection and pixel AUROC and writes `metrics.json`
/// into `out`.
pub fn cmd_evaluate(
    scores_csv: &Path,
    masks_dir: Option<&Path>,
    gt_root: &Path,
    per_image_mean: bool,
    out: &Path,
) -> Result<MetricsReport> {
    let rows = read_scores(scores_csv)?;
    let mut by_class: BTreeMap<String, Vec<&ScoreRow>> = BTreeMap::new();
    for row in &rows {
        let class = row.image_id.split('/').next().unwrap_or_default().to_string();
        by_class.entry(class).or_default().push(row);
    }
    let mut classes = BTreeMap::new();
    for (class, rows) in by_class {
        let labels = rows.iter().map(|r| Label::parse(&r.label)).collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let detection = auroc(&scores, &labels)?;
        let pixel = match masks_dir {
            None => None,
            Some(dir) => {
                let mut masks = Vec::with_capacity(rows.len());
                let mut gts = Vec::with_capacity(rows.len());
                for (row, &label) in rows.iter().zip(&labels) {
                    let m = read_raw_mask(&dir.join(format!("{}.f32", row.image_id)))?;
                    gts.push(ground_truth(gt_root, &row.image_id, label, m.height, m.width)?);
                    masks.push(m);
                }
                let result = if per_image_mean {
                    pixel_auroc_per_image_mean(&masks, &gts).map(|(v, _)| v)
                } else {
                    pixel_auroc(&masks, &gts).map(|r| r.auroc)
                };
                match result {
                    Ok(v) => Some(v),
                    Err(CpcError::DegenerateLabels(_)) => None,
                    Err(e) => return Err(e),
                }
            }
        };
        classes.insert(
            class,
            ClassMetrics {
                detection_auroc: detection.auroc,
                pixel_auroc: pixel,
                n_normal: detection.n_neg,
                n_anomalous: detection.n_pos,
            },
        );
    }
    let report = MetricsReport::new(classes, per_image_mean);
    let body = serde_json::to_string_pretty(&report).map_err(|e| CpcError::Config(e.to_string()))?;
    write_file(&out.join(METRICS_FILE), body)?;
    Ok(report)
}

/// Black, red, yellow, white ramp for `t` in `[0, 1]`.
fn heat_color(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(t * 3.0).min(1.0), (t * 3.0 - 1.0).clamp(0.0, 1.0), (t * 3.0 - 2.0).clamp(0.0, 1.0)]
}

/// Reads a heatmap from a raw `.f32` sidecar or any PNG.
fn read_heatmap(path: &Path) -> Result<AnomalyMask> {
    if path.extension().is_some_and(|e| e == "f32") {
        return read_raw_mask(path);
    }
    let img = read_gray(path)?;
    Ok(AnomalyMask {
        height: img.height(),
        width: img.width(),
        values: img.data().iter().map(|&v| v as f64).collect(),
    })
}

/// Input, heatmap overlay and (when given) ground truth side by side.
pub fn cmd_visualize(image: &Path, mask: &Path, gt: Option<&Path>, out: &Path) -> Result<()> {
    let img = read_gray(image)?;
    let heat = read_heatmap(mask)?;
    let gt = gt.map(read_mask).transpose()?;
    let (h, w) = (img.height(), img.width());
    if heat.height != h || heat.width != w {
        return Err(CpcError::Shape(format!(
            "image is {h}x{w} but the heatmap is {}x{}",
            heat.height, heat.width
        )));
    }
    if let Some(g) = &gt {
        if g.height() != h || g.width() != w {
            return Err(CpcError::Shape(format!(
                "image is {h}x{w} but the ground truth is {}x{}",
                g.height(),
                g.width()
            )));
        }
    }
    let (lo, hi) = heat
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let panels = if gt.is_some() { 3 } else { 2 };
    let mut canvas: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::new((w * panels) as u32, h as u32);
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            let g = img.get(y, x) as f64;
            canvas.put_pixel(x as u32, y as u32, Rgb([to_u8(g); 3]));
            let c = heat_color((heat.values[y * w + x] - lo) / span);
            let blend = |k: usize| to_u8(0.5 * g + 0.5 * c[k]);
            canvas.put_pixel((w + x) as u32, y as u32, Rgb([blend(0), blend(1), blend(2)]));
            if let Some(m) = &gt {
                let v = if m.get(y, x) { 255 } else { 0 };
                canvas.put_pixel((2 * w + x) as u32, y as u32, Rgb([v; 3]));
            }
        }
    }
    save_png(canvas, out)
}
