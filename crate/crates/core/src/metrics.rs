//! Threshold-free evaluation: ROC curves and AUROC with the midrank tie rule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{CpcError, Result};
use crate::raster::BinaryMask;
use crate::scoring::AnomalyMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    pub auroc: f64,
    /// `(false_positive_rate, true_positive_rate)` from `(0, 0)` to `(1, 1)`.
    pub curve: Vec<(f64, f64)>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// ROC over `(score, is_positive)` pairs. Ties count one half.
fn roc(mut pairs: Vec<(f64, bool)>) -> Result<RocResult> {
    if pairs.iter().any(|(s, _)| !s.is_finite()) {
        return Err(CpcError::Config("scores must be finite".into()));
    }
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CpcError::DegenerateLabels(format!(
            "AUROC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    // Twice the Mann-Whitney U, kept integral so the result is exact.
    let mut twice_u: u128 = 0;
    let mut tp = 0u128;
    let mut fp = 0u128;
    let mut curve = vec![(0.0, 0.0)];
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut pos_g, mut neg_g) = (0u128, 0u128);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 {
                pos_g += 1;
            } else {
                neg_g += 1;
            }
            j += 1;
        }
        let neg_below = n_neg as u128 - fp - neg_g;
        twice_u += pos_g * (2 * neg_below + neg_g);
        tp += pos_g;
        fp += neg_g;
        curve.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        i = j;
    }
    Ok(RocResult {
        auroc: twice_u as f64 / (2 * n_pos as u128 * n_neg as u128) as f64,
        curve,
        n_pos,
        n_neg,
    })
}

pub fn auroc(scores: &[f64], labels: &[Label]) -> Result<RocResult> {
    if scores.len() != labels.len() {
        return Err(CpcError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    roc(scores
        .iter()
        .zip(labels)
        .map(|(&s, l)| (s, l.is_anomalous()))
        .collect())
}

/// Trapezoidal area under a piecewise-linear curve.
pub fn trapezoid_area(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

fn check_pair(mask: &AnomalyMask, gt: &BinaryMask) -> Result<()> {
    if mask.height != gt.height() || mask.width != gt.width() {
        return Err(CpcError::Shape(format!(
            "{}x{} heatmap against {}x{} ground truth",
            mask.height,
            mask.width,
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Pixel-level AUROC with all pixels of all images pooled.
pub fn pixel_auroc(masks: &[AnomalyMask], gts: &[BinaryMask]) -> Result<RocResult> {
    if masks.len() != gts.len() {
        return Err(CpcError::Shape(format!("{} heatmaps for {} ground truths", masks.len(), gts.len())));
    }
    let mut pairs = Vec::with_capacity(masks.iter().map(|m| m.values.len()).sum());
    for (m, g) in masks.iter().zip(gts) {
        check_pair(m, g)?;
        pairs.extend(m.values.iter().zip(g.data()).map(|(&v, &t)| (v, t == 1)));
    }
    roc(pairs)
}

/// Mean of per-image pixel AUROCs over the images whose ground truth has both
/// defect and defect-free pixels; other images are skipped.
pub fn pixel_auroc_per_image_mean(masks: &[AnomalyMask], gts: &[BinaryMask]) -> Result<(f64, usize)> {
    if masks.len() != gts.len() {
        return Err(CpcError::Shape(format!("{} heatmaps for {} ground truths", masks.len(), gts.len())));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for (m, g) in masks.iter().zip(gts) {
        check_pair(m, g)?;
        let positive = g.count_positive();
        if positive == 0 || positive == g.data().len() {
            continue;
        }
        sum += pixel_auroc(std::slice::from_ref(m), std::slice::from_ref(g))?.auroc;
        used += 1;
    }
    if used == 0 {
        return Err(CpcError::DegenerateLabels("no image has both defect and defect-free pixels".into()));
    }
    Ok((sum / used as f64, used))
}

pub const MVTEC_TEXTURES: [&str; 5] = ["carpet", "grid", "leather", "tile", "wood"];
pub const MVTEC_OBJECTS: [&str; 10] = [
    "bottle",
    "cable",
    "capsule",
    "hazelnut",
    "metal_nut",
    "pill",
    "screw",
    "toothbrush",
    "transistor",
    "zipper",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassKind {
    Texture,
    Object,
    Other,
}

/// MVTec-AD grouping; synthetic classes count as textures.
pub fn class_kind(name: &str) -> ClassKind {
    if MVTEC_TEXTURES.contains(&name) || name.starts_with("synth") {
        ClassKind::Texture
    } else if MVTEC_OBJECTS.contains(&name) {
        ClassKind::Object
    } else {
        ClassKind::Other
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub detection_auroc: f64,
    pub pixel_auroc: Option<f64>,
    pub n_normal: usize,
    pub n_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollup {
    pub classes: usize,
    pub detection_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `pooled` or `per_image_mean`.
    pub pixel_auroc_mode: String,
    pub classes: BTreeMap<String, ClassMetrics>,
    pub mean: Rollup,
    pub texture_mean: Rollup,
    pub object_mean: Rollup,
}

fn rollup<'a>(entries: impl Iterator<Item = &'a ClassMetrics>) -> Rollup {
    let entries: Vec<_> = entries.collect();
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    Rollup {
        classes: entries.len(),
        detection_auroc: mean(entries.iter().map(|c| c.detection_auroc).collect()),
        pixel_auroc: mean(entries.iter().filter_map(|c| c.pixel_auroc).collect()),
    }
}

impl MetricsReport {
    pub fn new(classes: BTreeMap<String, ClassMetrics>, per_image_mean: bool) -> Self {
        let of_kind = |k: ClassKind| rollup(classes.iter().filter(|(n, _)| class_kind(n) == k).map(|(_, c)| c));
        Self {
            pixel_auroc_mode: if per_image_mean { "per_image_mean" } else { "pooled" }.into(),
            mean: rollup(classes.values()),
            texture_mean: of_kind(ClassKind::Texture),
            object_mean: of_kind(ClassKind::Object),
            classes,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn labels(bits: &[bool]) -> Vec<Label> {
        bits.iter()
            .map(|&b| if b { Label::Anomalous } else { Label::Normal })
            .collect()
    }

    #[test]
    fn worked_examples() {
        let l = labels(&[false, false, true, true]);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &l).unwrap().auroc, 1.0);
        assert_eq!(auroc(&[0.4, 0.3, 0.2, 0.1], &l).unwrap().auroc, 0.0);
        assert_eq!(auroc(&[0.5; 4], &l).unwrap().auroc, 0.5);
        // One tie between an anomalous and a normal score: (1 + 1 + 1 + 0.5) / 4.
        assert_eq!(auroc(&[0.1, 0.3, 0.3, 0.4], &l).unwrap().auroc, 0.875);
    }

    #[test]
    fn single_class_is_degenerate() {
        let r = auroc(&[0.1, 0.2], &labels(&[false, false]));
        assert!(matches!(r, Err(CpcError::DegenerateLabels(_))));
    }

    #[test]
    fn curve_area_matches_and_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let n = rng.random_range(2..60);
            let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            bits[0] = true;
            bits[1] = false;
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
            let r = auroc(&scores, &labels(&bits)).unwrap();
            assert!((trapezoid_area(&r.curve) - r.auroc).abs() < 1e-12);
            assert_eq!(*r.curve.last().unwrap(), (1.0, 1.0));
            assert!(r.curve.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
        }
    }

    proptest! {
        #[test]
        fn flipping_labels_complements(scores in prop::collection::vec(-1e3f64..1e3, 4..40)) {
            let mut sorted = scores.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted.windows(2).all(|w| w[0] != w[1]));
            let bits: Vec<bool> = (0..scores.len()).map(|i| i % 3 == 0).collect();
            let flipped: Vec<bool> = bits.iter().map(|b| !b).collect();
            let a = auroc(&scores, &labels(&bits)).unwrap().auroc;
            let b = auroc(&scores, &labels(&flipped)).unwrap().auroc;
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }

        #[test]
        fn invariant_under_increasing_transform(scores in prop::collection::vec(-5f64..5.0, 4..40)) {
            let bits: Vec<bool> = (0..scores.len()).map(|i| i % 2 == 0).collect();
            let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            let a = auroc(&scores, &labels(&bits)).unwrap().auroc;
            let b = auroc(&mapped, &labels(&bits)).unwrap().auroc;
            prop_assert_eq!(a, b);
        }
    }

    fn mask(values: Vec<f64>, side: usize) -> AnomalyMask {
        AnomalyMask {
            height: side,
            width: side,
            values,
        }
    }

    #[test]
    fn constant_heatmaps_give_one_half() {
        let m = mask(vec![0.3; 16], 4);
        let mut g = BinaryMask::zeros(4, 4);
        g.set(1, 1, true);
        g.set(2, 2, true);
        assert_eq!(pixel_auroc(&[m.clone(), m], &[g.clone(), g]).unwrap().auroc, 0.5);
    }

    #[test]
    fn pooled_and_per_image_differ_and_skip_normals() {
        let mut g1 = BinaryMask::zeros(2, 2);
        g1.set(0, 0, true);
        let g2 = BinaryMask::zeros(2, 2);
        let mut g3 = BinaryMask::zeros(2, 2);
        g3.set(1, 1, true);
        let m1 = mask(vec![0.9, 0.1, 0.1, 0.1], 2);
        let m2 = mask(vec![0.95, 0.95, 0.95, 0.95], 2);
        let m3 = mask(vec![0.0, 0.0, 0.0, 0.5], 2);
        let (mean, used) = pixel_auroc_per_image_mean(&[m1.clone(), m2.clone(), m3.clone()], &[g1.clone(), g2.clone(), g3.clone()]).unwrap();
        assert_eq!((mean, used), (1.0, 2));
        let pooled = pixel_auroc(&[m1, m2, m3], &[g1, g2, g3]).unwrap().auroc;
        assert!(pooled < 1.0);
    }

    #[test]
    fn rollups_follow_class_groups() {
        let c = |d: f64, p: Option<f64>| ClassMetrics {
            detection_auroc: d,
            pixel_auroc: p,
            n_normal: 1,
            n_anomalous: 1,
        };
        let mut classes = BTreeMap::new();
        classes.insert("carpet".to_string(), c(0.8, Some(0.9)));
        classes.insert("bottle".to_string(), c(0.6, Some(0.7)));
        classes.insert("synth-checker".to_string(), c(1.0, None));
        classes.insert("mystery".to_string(), c(0.2, Some(0.5)));
        let r = MetricsReport::new(classes, false);
        assert_eq!(r.mean.classes, 4);
        assert!((r.mean.detection_auroc.unwrap() - 0.65).abs() < 1e-12);
        assert!((r.texture_mean.detection_auroc.unwrap() - 0.9).abs() < 1e-12);
        assert_eq!(r.texture_mean.pixel_auroc, Some(0.9));
        assert_eq!(r.object_mean.detection_auroc, Some(0.6));
        assert_eq!(r.pixel_auroc_mode, "pooled");
    }
}
