//! Deterministic synthetic texture datasets with painted defects.
//!
//! Normal images share one texture family whose global parameters come from
//! the dataset seed; each image varies in phase/offset and carries mild
//! pixel noise. Anomalous images get one axis-aligned defect whose ground
//! truth mask is exactly the set of pixels the painter changed.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, ImageSample, Label, Origin, GOOD};
use crate::error::{CpcError, Result};
use crate::raster::{BinaryMask, GrayImage};
use crate::seed::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TextureKind {
    SineGrating,
    Checker,
    ValueNoise,
}

impl TextureKind {
    pub fn name(self) -> &'static str {
        match self {
            TextureKind::SineGrating => "sine-grating",
            TextureKind::Checker => "checker",
            TextureKind::ValueNoise => "value-noise",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefectKind {
    RectangleBlot,
    IntensityShift,
    TextureSwap,
}

impl DefectKind {
    pub fn name(self) -> &'static str {
        match self {
            DefectKind::RectangleBlot => "rectangle-blot",
            DefectKind::IntensityShift => "intensity-shift",
            DefectKind::TextureSwap => "texture-swap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthDefectConfig {
    pub texture_kind: TextureKind,
    pub defect_kind: DefectKind,
    /// Defect side lengths as fractions of the image side, `[min, max]`.
    pub defect_size_range: [f64; 2],
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_anomalous: usize,
    pub seed: u64,
}

impl SynthDefectConfig {
    pub fn validate(&self, image_side: usize) -> Result<()> {
        let [lo, hi] = self.defect_size_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(CpcError::Config(format!(
                "defect_size_range {:?} must satisfy 0 < min <= max <= 0.5",
                self.defect_size_range
            )));
        }
        if (lo * image_side as f64).round() < 1.0 {
            return Err(CpcError::Config(format!(
                "defects of {lo} x {image_side}px round to zero pixels"
            )));
        }
        if (hi * image_side as f64).round() as usize > image_side {
            return Err(CpcError::Config("defect larger than the image".into()));
        }
        if self.n_train == 0 {
            return Err(CpcError::Config("n_train must be positive".into()));
        }
        if self.n_test_normal + self.n_test_anomalous == 0 {
            return Err(CpcError::Config("the test split would be empty".into()));
        }
        if image_side < 8 {
            return Err(CpcError::Config(format!("image side {image_side} is too small")));
        }
        Ok(())
    }

    pub fn class_name(&self) -> String {
        format!("synth-{}", self.texture_kind.name())
    }
}

/// Dataset-wide texture parameters.
#[derive(Debug, Clone, Copy)]
struct TextureStyle {
    kind: TextureKind,
    angle: f64,
    cycles: f64,
    cell: usize,
}

impl TextureStyle {
    fn from_seed(kind: TextureKind, seed: u64, side: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x7e47]));
        let angle = rng.random_range(0.0..PI);
        let cycles = rng.random_range(5.0..9.0);
        let cell = ((side as f64 / rng.random_range(6.0..10.0)).round() as usize).max(2);
        Self {
            kind,
            angle,
            cycles,
            cell,
        }
    }
}

const NOISE: f32 = 0.03;

fn grating(side: usize, angle: f64, cycles: f64, phase: f64, rng: &mut ChaCha8Rng) -> GrayImage {
    let freq = 2.0 * PI * cycles / side as f64;
    let (c, s) = (angle.cos(), angle.sin());
    GrayImage::from_fn(side, side, |y, x| {
        let v = 0.5 + 0.3 * (freq * (x as f64 * c + y as f64 * s) + phase).sin();
        v as f32 + rng.random_range(-NOISE..NOISE)
    })
}

fn checker(side: usize, cell: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let oy = rng.random_range(0..2 * cell);
    let ox = rng.random_range(0..2 * cell);
    GrayImage::from_fn(side, side, |y, x| {
        let on = ((y + oy) / cell + (x + ox) / cell).is_multiple_of(2);
        (if on { 0.65 } else { 0.35 }) + rng.random_range(-NOISE..NOISE)
    })
}

fn value_noise(side: usize, cell: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    let n = side / cell + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    GrayImage::from_fn(side, side, |y, x| {
        let (gy, gx) = (y / cell, x / cell);
        let ty = smooth((y % cell) as f32 / cell as f32);
        let tx = smooth((x % cell) as f32 / cell as f32);
        let at = |r: usize, c: usize| lattice[r * n + c];
        let top = at(gy, gx) * (1.0 - tx) + at(gy, gx + 1) * tx;
        let bottom = at(gy + 1, gx) * (1.0 - tx) + at(gy + 1, gx + 1) * tx;
        0.2 + 0.6 * (top * (1.0 - ty) + bottom * ty) + rng.random_range(-NOISE..NOISE)
    })
}

fn render(style: &TextureStyle, side: usize, rng: &mut ChaCha8Rng) -> GrayImage {
    match style.kind {
        TextureKind::SineGrating => {
            let phase = rng.random_range(0.0..2.0 * PI);
            grating(side, style.angle, style.cycles, phase, rng)
        }
        TextureKind::Checker => checker(side, style.cell, rng),
        TextureKind::ValueNoise => value_noise(side, style.cell, rng),
    }
}

/// Renders one defect-free image of the dataset's texture.
pub fn render_texture(kind: TextureKind, dataset_seed: u64, side: usize, image_seed: u64) -> GrayImage {
    let style = TextureStyle::from_seed(kind, dataset_seed, side);
    render(&style, side, &mut ChaCha8Rng::seed_from_u64(image_seed))
}

/// Paints one defect in place and returns its exact mask.
pub fn paint_defect(
    img: &mut GrayImage,
    kind: DefectKind,
    size_range: [f64; 2],
    rng: &mut ChaCha8Rng,
) -> BinaryMask {
    let side = img.height();
    let draw_len = |rng: &mut ChaCha8Rng| {
        let frac = if size_range[0] == size_range[1] {
            size_range[0]
        } else {
            rng.random_range(size_range[0]..=size_range[1])
        };
        ((frac * side as f64).round() as usize).clamp(1, side)
    };
    let h = draw_len(rng);
    let w = draw_len(rng);
    let top = rng.random_range(0..=side - h);
    let left = rng.random_range(0..=side - w);

    let swap = match kind {
        DefectKind::TextureSwap => {
            let angle = rng.random_range(0.0..PI);
            let cycles = rng.random_range(12.0..16.0);
            let phase = rng.random_range(0.0..2.0 * PI);
            Some(grating(side, angle, cycles, phase, rng))
        }
        _ => None,
    };
    let blot = if rng.random_bool(0.5) {
        rng.random_range(0.0..0.08f32)
    } else {
        rng.random_range(0.92..1.0f32)
    };
    let shift = rng.random_range(0.2..0.35f32) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };

    let mut mask = BinaryMask::zeros(side, side);
    for y in top..top + h {
        for x in left..left + w {
            let old = img.get(y, x);
            let mut new = match kind {
                DefectKind::RectangleBlot => blot,
                DefectKind::IntensityShift => (old + shift).clamp(0.0, 1.0),
                DefectKind::TextureSwap => swap.as_ref().map_or(old, |s| s.get(y, x)),
            };
            if (new - old).abs() < 0.02 {
                new = if old < 0.5 { old + 0.1 } else { old - 0.1 };
            }
            img.set(y, x, new.clamp(0.0, 1.0));
            mask.set(y, x, true);
        }
    }
    mask
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST_NORMAL: u64 = 2;
const STREAM_TEST_ANOMALOUS: u64 = 3;

/// Returns `(clean, defective, mask)` for the `index`-th anomalous test image.
pub fn synthesize_anomalous(
    config: &SynthDefectConfig,
    image_side: usize,
    index: usize,
) -> Result<(GrayImage, GrayImage, BinaryMask)> {
    config.validate(image_side)?;
    let style = TextureStyle::from_seed(config.texture_kind, config.seed, image_side);
    let mut rng =
        ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[STREAM_TEST_ANOMALOUS, index as u64]));
    let clean = render(&style, image_side, &mut rng);
    let mut defective = clean.clone();
    let mask = paint_defect(&mut defective, config.defect_kind, config.defect_size_range, &mut rng);
    Ok((clean, defective, mask))
}

pub fn generate_synthetic(config: &SynthDefectConfig, image_side: usize) -> Result<DatasetSplit> {
    config.validate(image_side)?;
    let class = config.class_name();
    let style = TextureStyle::from_seed(config.texture_kind, config.seed, image_side);
    let normal = |stream: u64, i: usize, origin: Origin| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, &[stream, i as u64]));
        let split = if origin == Origin::Train { "train" } else { "test" };
        ImageSample {
            pixels: render(&style, image_side, &mut rng),
            label: Label::Normal,
            gt_mask: None,
            source_id: format!("{class}/{split}/{GOOD}/{i:03}"),
            category: GOOD.to_string(),
            origin,
        }
    };
    let train = (0..config.n_train)
        .map(|i| normal(STREAM_TRAIN, i, Origin::Train))
        .collect();
    let mut test: Vec<ImageSample> = (0..config.n_test_normal)
        .map(|i| normal(STREAM_TEST_NORMAL, i, Origin::Test))
        .collect();
    let defect = config.defect_kind.name();
    for i in 0..config.n_test_anomalous {
        let (_, pixels, mask) = synthesize_anomalous(config, image_side, i)?;
        test.push(ImageSample {
            pixels,
            label: Label::Anomalous,
            gt_mask: Some(mask),
            source_id: format!("{class}/test/{defect}/{i:03}"),
            category: defect.to_string(),
            origin: Origin::Test,
        });
    }
    Ok(DatasetSplit {
        class_name: class,
        train,
        test,
    })
}
