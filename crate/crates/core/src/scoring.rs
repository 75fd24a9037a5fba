//! Test-time anomaly scoring.
//!
//! Every directional pair in a test image is scored with InfoNCE against
//! negatives from a bank of training-image embeddings. The loss of a pair is
//! accumulated on its target's lattice position; a position's score is the
//! mean over everything that landed on it.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{directional_pairs, eval_pair, Direction};
use crate::dataset::{ImageSample, Label, Origin};
use crate::error::{CpcError, Result};
use crate::geometry::{extract_subpatches, Cell, GridLayout};
use crate::raster::GrayImage;
use crate::seed::mix_seed;
use crate::trainer::{hex, validate_offsets, ModelBundle};

/// Whether bank negatives are redrawn for every evaluation site or once per
/// image, direction and offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeScope {
    #[default]
    PerSite,
    PerImage,
}

/// Embeddings of unaugmented training sub-patches, one pool per model unit.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeBank {
    /// Row-major pools, `pool_size x dim`, indexed like `bundle.units`.
    pub pools: Vec<Vec<f64>>,
    pub dim: usize,
    pub pool_size: usize,
    pub bundle_fingerprint: String,
    /// SHA-256 over the source image ids, pool limit and seed.
    pub fingerprint: String,
    pub source_ids: Vec<String>,
}

impl NegativeBank {
    pub fn vector(&self, unit: usize, i: usize) -> &[f64] {
        &self.pools[unit][i * self.dim..(i + 1) * self.dim]
    }
}

fn source_fingerprint(ids: &[String], max_pool_size: usize, seed: u64) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.as_bytes());
        h.update([0u8]);
    }
    h.update((max_pool_size as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    hex(&h.finalize())
}

pub fn build_negative_bank(
    train: &[ImageSample],
    bundle: &ModelBundle,
    max_pool_size: usize,
    seed: u64,
) -> Result<NegativeBank> {
    bundle.validate()?;
    if train.is_empty() {
        return Err(CpcError::Config("cannot build a negative bank without training images".into()));
    }
    for s in train {
        if s.origin != Origin::Train || s.label != Label::Normal {
            return Err(CpcError::ContaminatedBank(format!(
                "{} is not a defect-free training image",
                s.source_id
            )));
        }
    }
    let layout = bundle.layout()?;
    let side = layout.spec.subpatch_side;
    let mut data = Vec::with_capacity(train.len() * layout.blocks_per_image() * side * side);
    for s in train {
        data.extend(extract_subpatches(&s.pixels, &layout)?.data);
    }
    let total = train.len() * layout.blocks_per_image();
    let keep: Option<Vec<usize>> = (total > max_pool_size).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xba7c]));
        let mut picked = index::sample(&mut rng, total, max_pool_size).into_vec();
        picked.sort_unstable();
        picked
    });
    let pool_size = keep.as_ref().map_or(total, Vec::len);
    let required = bundle.train_config.negatives;
    if pool_size < required {
        return Err(CpcError::BankTooSmall {
            pool: pool_size,
            required,
        });
    }
    let dim = bundle.encoder_config.embedding_dim;
    let block = side * side;
    let pools = bundle
        .units
        .iter()
        .map(|unit| {
            let z = match &keep {
                None => unit.encoder.embed(&data, side)?,
                Some(idx) => {
                    let mut chosen = Vec::with_capacity(idx.len() * block);
                    for &i in idx {
                        chosen.extend_from_slice(&data[i * block..(i + 1) * block]);
                    }
                    unit.encoder.embed(&chosen, side)?
                }
            };
            Ok(z.into_iter().map(f64::from).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    let source_ids: Vec<String> = train.iter().map(|s| s.source_id.clone()).collect();
    Ok(NegativeBank {
        pools,
        dim,
        pool_size,
        bundle_fingerprint: bundle.fingerprint(),
        fingerprint: source_fingerprint(&source_ids, max_pool_size, seed),
        source_ids,
    })
}

/// Per-position mean loss over the distinct sub-patch lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    /// Lattice side (`distinct_positions_per_axis`).
    pub side: usize,
    /// Mean loss per position; `0.0` where `counts` is zero.
    pub values: Vec<f64>,
    pub counts: Vec<u32>,
}

impl ScoreMap {
    /// Finalizes `(position, loss)` contributions as per-position means.
    pub fn from_contributions(side: usize, contributions: impl IntoIterator<Item = (Cell, f64)>) -> Result<Self> {
        let mut sums = vec![0.0; side * side];
        let mut counts = vec![0u32; side * side];
        for ((r, c), loss) in contributions {
            if r >= side || c >= side {
                return Err(CpcError::Geometry(format!("position ({r}, {c}) outside a {side}x{side} lattice")));
            }
            sums[r * side + c] += loss;
            counts[r * side + c] += 1;
        }
        let values = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
            .collect();
        Ok(Self { side, values, counts })
    }

    /// A fully present map with the given values (row-major).
    pub fn dense(side: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != side * side {
            return Err(CpcError::Shape(format!("{} values for a {side}x{side} lattice", values.len())));
        }
        Ok(Self {
            side,
            values,
            counts: vec![1; side * side],
        })
    }

    pub fn get(&self, position: Cell) -> Option<f64> {
        let i = position.0 * self.side + position.1;
        (self.counts[i] > 0).then_some(self.values[i])
    }

    pub fn present(&self) -> impl Iterator<Item = (Cell, f64)> + '_ {
        (0..self.values.len())
            .filter(|&i| self.counts[i] > 0)
            .map(|i| ((i / self.side, i % self.side), self.values[i]))
    }

    pub fn present_count(&self) -> usize {
        self.counts.iter().filter(|&&n| n > 0).count()
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        self.present().map(|(_, v)| v).fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

/// Parameters of test-time scoring that are not part of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringParams {
    pub offsets: Vec<usize>,
    /// Negatives per positive pair (`N - 1`).
    pub negatives: usize,
    pub scope: NegativeScope,
}

/// Seed for one image derived from a run seed and the image identifier.
pub fn image_seed(run_seed: u64, image_id: &str) -> u64 {
    mix_seed(run_seed, &[crate::seed::fnv1a(image_id.as_bytes())])
}

pub fn score_image(
    image: &GrayImage,
    bundle: &ModelBundle,
    bank: &NegativeBank,
    params: &ScoringParams,
    rng_seed: u64,
) -> Result<ScoreMap> {
    let layout = bundle.layout()?;
    check_bank(bundle, bank, params, &layout)?;
    let blocks = extract_subpatches(image, &layout)?;
    let s = layout.subpatches_per_patch_axis;
    let p = layout.patches_per_axis;
    let d = bank.dim;
    let mut contributions = Vec::new();
    let mut embeddings: Vec<Option<Vec<f64>>> = vec![None; bundle.units.len()];
    let mut directions = bundle.directions();
    directions.sort();
    for direction in directions {
        let (unit, encoder, predictor) = bundle.model_for(direction).expect("direction listed by bundle");
        let z = embeddings[unit].get_or_insert_with(|| {
            encoder
                .embed(&blocks.data, blocks.side)
                .map(|v| v.into_iter().map(f64::from).collect())
                .unwrap_or_default()
        });
        if z.len() != layout.blocks_per_image() * d {
            return Err(CpcError::Shape("encoder output does not match the bank dimension".into()));
        }
        let z: &[f64] = z;
        let row = |i: usize| &z[i * d..(i + 1) * d];
        let bank_row = |i: usize| bank.vector(unit, i);
        for &k in &params.offsets {
            let w = predictor.matrix_f64(k)?;
            let pairs = directional_pairs(s, direction, k)?;
            let shared: Option<Vec<usize>> = (params.scope == NegativeScope::PerImage).then(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, &[direction.index() as u64, k as u64]));
                index::sample(&mut rng, bank.pool_size, params.negatives).into_vec()
            });
            for patch in (0..p).flat_map(|r| (0..p).map(move |c| (r, c))) {
                for pair in &pairs {
                    let negs = match &shared {
                        Some(n) => n.clone(),
                        None => {
                            let site = [
                                (patch.0 * p + patch.1) as u64,
                                (pair.target.0 * s + pair.target.1) as u64,
                                direction.index() as u64,
                                k as u64,
                            ];
                            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(rng_seed, &site));
                            index::sample(&mut rng, bank.pool_size, params.negatives).into_vec()
                        }
                    };
                    let ev = eval_pair(
                        &w,
                        row(layout.block_index(patch, pair.context)),
                        row(layout.block_index(patch, pair.target)),
                        negs.iter().map(|&j| bank_row(j)),
                    );
                    contributions.push((layout.global_position(patch, pair.target)?, ev.loss));
                }
            }
        }
    }
    ScoreMap::from_contributions(layout.distinct_positions_per_axis, contributions)
}

fn check_bank(bundle: &ModelBundle, bank: &NegativeBank, params: &ScoringParams, layout: &GridLayout) -> Result<()> {
    if bank.bundle_fingerprint != bundle.fingerprint() {
        return Err(CpcError::Config("negative bank was built from a different model bundle".into()));
    }
    if bank.pools.len() != bundle.units.len() || bank.dim != bundle.encoder_config.embedding_dim {
        return Err(CpcError::Config("negative bank layout does not match the bundle".into()));
    }
    if params.negatives == 0 {
        return Err(CpcError::Config("scoring needs at least one negative".into()));
    }
    if bank.pool_size < params.negatives {
        return Err(CpcError::BankTooSmall {
            pool: bank.pool_size,
            required: params.negatives,
        });
    }
    validate_offsets(&params.offsets, layout)?;
    for &k in &params.offsets {
        for d in bundle.directions() {
            bundle.model_for(d).expect("listed").2.matrix(k)?;
        }
    }
    Ok(())
}

/// Number of top values averaged for a map with `present` positions.
pub fn top_count(present: usize, top_fraction: f64) -> usize {
    // The epsilon keeps exact products such as 0.05 * 100 from rounding up.
    ((top_fraction * present as f64 - 1e-9).ceil() as usize).clamp(1, present.max(1))
}

/// Mean of the largest `ceil(top_fraction * M)` present values.
pub fn image_score(map: &ScoreMap, top_fraction: f64) -> Result<f64> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(CpcError::Config(format!("top_fraction {top_fraction} must lie in (0, 1]")));
    }
    let mut values: Vec<f64> = map.present().map(|(_, v)| v).collect();
    if values.is_empty() {
        return Err(CpcError::EmptyScoreMap);
    }
    let m = top_count(values.len(), top_fraction);
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values[..m].iter().sum::<f64>() / m as f64)
}

/// Full-resolution heatmap.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl AnomalyMask {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Number of present lattice positions whose footprint covers each pixel.
pub fn coverage_counts(map: &ScoreMap, layout: &GridLayout) -> Result<Vec<u32>> {
    let side = layout.spec.image_side;
    let mut counts = vec![0u32; side * side];
    for (pos, _) in map.present() {
        let r = layout.pixel_footprint(pos)?;
        for y in r.top..r.top + r.height {
            for c in &mut counts[y * side + r.left..y * side + r.left + r.width] {
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Sum of present values whose footprint covers each pixel.
pub fn footprint_sums(map: &ScoreMap, layout: &GridLayout) -> Result<Vec<f64>> {
    let side = layout.spec.image_side;
    let mut sums = vec![0.0; side * side];
    for (pos, v) in map.present() {
        let r = layout.pixel_footprint(pos)?;
        for y in r.top..r.top + r.height {
            for s in &mut sums[y * side + r.left..y * side + r.left + r.width] {
                *s += v;
            }
        }
    }
    Ok(sums)
}

/// Averages the values of all footprints covering each pixel. Pixels no
/// present footprint covers take the map minimum.
pub fn make_mask(map: &ScoreMap, layout: &GridLayout) -> Result<AnomalyMask> {
    if map.side != layout.distinct_positions_per_axis {
        return Err(CpcError::Shape(format!(
            "{}x{} score map for a {}x{} lattice",
            map.side, map.side, layout.distinct_positions_per_axis, layout.distinct_positions_per_axis
        )));
    }
    let side = layout.spec.image_side;
    let (lo, _) = map.min_max().unwrap_or((0.0, 0.0));
    let sums = footprint_sums(map, layout)?;
    let counts = coverage_counts(map, layout)?;
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| if n > 0 { s / n as f64 } else { lo })
        .collect();
    Ok(AnomalyMask {
        height: side,
        width: side,
        values,
    })
}

pub fn classify(score: f64, tau: f64) -> Label {
    if score >= tau {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

/// Which directions reach each lattice position as a target, useful to see
/// which positions a given offset set leaves uncovered.
pub fn target_counts(layout: &GridLayout, directions: &[Direction], offsets: &[usize]) -> Result<Vec<u32>> {
    let side = layout.distinct_positions_per_axis;
    let p = layout.patches_per_axis;
    let mut counts = vec![0u32; side * side];
    for &d in directions {
        for &k in offsets {
            for pair in directional_pairs(layout.subpatches_per_patch_axis, d, k)? {
                for patch in (0..p).flat_map(|r| (0..p).map(move |c| (r, c))) {
                    let (r, c) = layout.global_position(patch, pair.target)?;
                    counts[r * side + c] += 1;
                }
            }
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::checkpoint::tests::small_bundle;
    use crate::dataset::GOOD;
    use crate::geometry::{plan_grid, GridSpec};

    fn train_samples(n: usize) -> Vec<ImageSample> {
        (0..n)
            .map(|i| ImageSample {
                pixels: GrayImage::from_fn(32, 32, |y, x| ((y * 7 + x * 3 + i) % 11) as f32 / 11.0),
                label: Label::Normal,
                gt_mask: None,
                source_id: format!("c/train/{GOOD}/{i:03}"),
                category: GOOD.into(),
                origin: Origin::Train,
            })
            .collect()
    }

    fn params() -> ScoringParams {
        ScoringParams {
            offsets: vec![2],
            negatives: 4,
            scope: NegativeScope::PerSite,
        }
    }

    #[test]
    fn top_fraction_examples() {
        assert_eq!(top_count(529, 0.05), 27);
        assert_eq!(top_count(100, 0.05), 5);
        assert_eq!(top_count(3, 0.05), 1);
        let mut values = vec![0.0; 100];
        values[37] = 10.0;
        let map = ScoreMap::dense(10, values).unwrap();
        assert_eq!(image_score(&map, 0.05).unwrap(), 2.0);
        let flat = ScoreMap::dense(4, vec![0.7; 16]).unwrap();
        assert_eq!(image_score(&flat, 0.05).unwrap(), 0.7);
    }

    #[test]
    fn empty_map_is_an_error() {
        let map = ScoreMap::from_contributions(3, []).unwrap();
        assert!(matches!(image_score(&map, 0.05), Err(CpcError::EmptyScoreMap)));
    }

    #[test]
    fn image_score_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let values: Vec<f64> = (0..49).map(|_| rng.random_range(0.0..5.0)).collect();
            let base = image_score(&ScoreMap::dense(7, values.clone()).unwrap(), 0.1).unwrap();
            let mut bumped = values;
            let i = rng.random_range(0..49);
            bumped[i] += rng.random_range(0.0..3.0);
            assert!(image_score(&ScoreMap::dense(7, bumped).unwrap(), 0.1).unwrap() >= base);
        }
    }

    #[test]
    fn classify_boundary() {
        assert_eq!(classify(1.5, 1.5), Label::Anomalous);
        assert_eq!(classify(1e300, f64::INFINITY), Label::Normal);
        assert_eq!(classify(1.0, 1.5), Label::Normal);
    }

    #[test]
    fn uniform_map_gives_uniform_mask() {
        let layout = plan_grid(GridSpec::full_scale()).unwrap();
        let map = ScoreMap::dense(23, vec![0.3; 529]).unwrap();
        let mask = make_mask(&map, &layout).unwrap();
        assert_eq!((mask.height, mask.width), (768, 768));
        assert!(mask.values.iter().all(|&v| v == 0.3));
    }

    #[test]
    fn single_position_footprint() {
        let layout = plan_grid(GridSpec::full_scale()).unwrap();
        let mut values = vec![0.0; 529];
        values[10 * 23 + 10] = 1.0;
        let map = ScoreMap::dense(23, values).unwrap();
        let mask = make_mask(&map, &layout).unwrap();
        // Brute-force coverage: a pixel lies in position (r, c)'s footprint
        // when r*32 <= y < r*32+64 and likewise for x.
        let cover = |p: usize| (0..23).filter(|&r| r * 32 <= p && p < r * 32 + 64).count();
        for y in 0..768 {
            for x in 0..768 {
                let inside = (320..384).contains(&y) && (320..384).contains(&x);
                let expected = if inside { 1.0 / (cover(y) * cover(x)) as f64 } else { 0.0 };
                assert_eq!(mask.get(y, x), expected, "({y}, {x})");
            }
        }
    }

    #[test]
    fn mask_stays_within_map_range() {
        let layout = plan_grid(GridSpec::new(128, 64, 32, 32, 16)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let values: Vec<f64> = (0..49).map(|_| rng.random_range(0.0..4.0)).collect();
            let map = ScoreMap::dense(7, values).unwrap();
            let (lo, hi) = map.min_max().unwrap();
            let mask = make_mask(&map, &layout).unwrap();
            assert!(mask.values.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }

    #[test]
    fn absent_positions_are_excluded() {
        let map = ScoreMap::from_contributions(3, [((0, 0), 1.0), ((0, 0), 3.0), ((2, 2), 5.0)]).unwrap();
        assert_eq!(map.get((0, 0)), Some(2.0));
        assert_eq!(map.get((1, 1)), None);
        assert_eq!(map.present_count(), 2);
        assert_eq!(image_score(&map, 1.0).unwrap(), 3.5);
    }

    #[test]
    fn far_offset_target_rows_by_enumeration() {
        let layout = plan_grid(GridSpec::full_scale()).unwrap();
        let counts = target_counts(&layout, &[Direction::FromAbove], &[6]).unwrap();
        // Targets sit at local row 6 only, i.e. lattice rows 4*p + 6, p in 0..5.
        for r in 0..23 {
            let reachable = r >= 6 && (r - 6) % 4 == 0 && (r - 6) / 4 < 5;
            for c in 0..23 {
                assert_eq!(counts[r * 23 + c] > 0, reachable, "({r}, {c})");
            }
        }
    }

    #[test]
    fn bank_counts_and_determinism() {
        let bundle = small_bundle(vec![Direction::FromAbove], 1);
        let train = train_samples(1);
        let a = build_negative_bank(&train, &bundle, 10_000, 4).unwrap();
        assert_eq!(a.pool_size, bundle.layout().unwrap().blocks_per_image());
        let small = build_negative_bank(&train, &bundle, 20, 4).unwrap();
        assert_eq!(small.pool_size, 20);
        assert_eq!(small, build_negative_bank(&train, &bundle, 20, 4).unwrap());
        let fewer = build_negative_bank(&train_samples(2)[1..], &bundle, 10_000, 4).unwrap();
        assert_ne!(fewer.fingerprint, build_negative_bank(&train_samples(2), &bundle, 10_000, 4).unwrap().fingerprint);
        assert!(matches!(
            build_negative_bank(&train, &bundle, 3, 4),
            Err(CpcError::BankTooSmall { pool: 3, required: 4 })
        ));
    }

    #[test]
    fn test_images_never_enter_the_bank() {
        let bundle = small_bundle(vec![Direction::FromAbove], 1);
        let mut train = train_samples(2);
        train[1].origin = Origin::Test;
        assert!(matches!(
            build_negative_bank(&train, &bundle, 100, 0),
            Err(CpcError::ContaminatedBank(_))
        ));
    }

    #[test]
    fn scoring_is_deterministic_and_symmetric() {
        let bundle = small_bundle(Direction::ALL.to_vec(), 1);
        let bank = build_negative_bank(&train_samples(2), &bundle, 1000, 1).unwrap();
        let img = GrayImage::from_fn(32, 32, |y, x| ((y + 2 * x) % 9) as f32 / 9.0);
        let a = score_image(&img, &bundle, &bank, &params(), 77).unwrap();
        let b = score_image(&img, &bundle, &bank, &params(), 77).unwrap();
        assert_eq!(a, b);
        assert!(a.present().all(|(_, v)| v.is_finite() && v >= 0.0));

        // Recombining per-direction maps in reverse order gives the same mean.
        let layout = bundle.layout().unwrap();
        let mut sums = vec![0.0; a.values.len()];
        let mut counts = vec![0u32; a.values.len()];
        for d in Direction::ALL.iter().rev() {
            let mut single = bundle.clone();
            single.units.retain(|u| u.directions() == vec![*d]);
            single.train_config.directions = vec![*d];
            let mut sub_bank = bank.clone();
            let unit = bundle.model_for(*d).unwrap().0;
            sub_bank.pools = vec![bank.pools[unit].clone()];
            sub_bank.bundle_fingerprint = single.fingerprint();
            let m = score_image(&img, &single, &sub_bank, &params(), 77).unwrap();
            for i in 0..m.values.len() {
                sums[i] += m.values[i] * m.counts[i] as f64;
                counts[i] += m.counts[i];
            }
        }
        assert_eq!(counts, a.counts);
        for i in 0..sums.len() {
            if counts[i] > 0 {
                assert!((sums[i] / counts[i] as f64 - a.values[i]).abs() < 1e-9);
            }
        }
        assert_eq!(layout.distinct_positions_per_axis, a.side);
    }

    #[test]
    fn per_image_scope_reuses_negatives() {
        let bundle = small_bundle(vec![Direction::FromLeft], 1);
        let bank = build_negative_bank(&train_samples(2), &bundle, 1000, 1).unwrap();
        let img = GrayImage::filled(32, 32, 0.5);
        let p = ScoringParams {
            scope: NegativeScope::PerImage,
            ..params()
        };
        let map = score_image(&img, &bundle, &bank, &p, 3).unwrap();
        // A constant image has identical contexts and targets everywhere, so
        // shared negatives make every present value equal.
        let (lo, hi) = map.min_max().unwrap();
        assert_eq!(lo, hi);
    }

    #[test]
    fn mismatched_bank_is_rejected() {
        let bundle = small_bundle(vec![Direction::FromLeft], 1);
        let other = small_bundle(vec![Direction::FromLeft], 2);
        let bank = build_negative_bank(&train_samples(1), &other, 1000, 1).unwrap();
        let img = GrayImage::filled(32, 32, 0.5);
        assert!(matches!(
            score_image(&img, &bundle, &bank, &params(), 0),
            Err(CpcError::Config(_))
        ));
    }
}
