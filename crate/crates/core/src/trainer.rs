//! Per-class training of the directional CPC models.
//!
//! Each direction gets its own encoder and predictor (a [`ModelUnit`]) unless
//! `share_encoder` is set, in which case one unit holds a single encoder and
//! all four predictors. A step embeds every sub-patch of a batch of augmented
//! training images and minimizes the mean InfoNCE loss over all patches,
//! directional pairs, directions of the unit and offsets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{directional_pairs, eval_pair, sample_negative_indices, Direction, DirectionalPredictor};
use crate::dataset::{augment_train, DatasetSplit, ImageSample, Label, Origin};
use crate::encoder::{init_encoder, Encoder, EncoderConfig};
use crate::error::{CpcError, Result};
use crate::geometry::{extract_subpatches, plan_grid, GridLayout, GridSpec};
use crate::nn::{Adam, AdamConfig, Param, Stateful};
use crate::seed::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per optimization step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Negatives per positive pair (`N - 1`).
    pub negatives: usize,
    pub seed: u64,
    pub offsets: Vec<usize>,
    pub directions: Vec<Direction>,
    pub share_encoder: bool,
    pub augment: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 16,
            learning_rate: 1.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            negatives: 16,
            seed: 0,
            offsets: vec![2, 3],
            directions: Direction::ALL.to_vec(),
            share_encoder: false,
            augment: true,
            checkpoint_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, layout: &GridLayout) -> Result<()> {
        let fail = |msg: String| Err(CpcError::Config(msg));
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if self.negatives == 0 {
            return fail("at least one negative is required".into());
        }
        if self.directions.is_empty() {
            return fail("no training directions configured".into());
        }
        let mut dirs = self.directions.clone();
        dirs.sort();
        dirs.dedup();
        if dirs.len() != self.directions.len() {
            return fail("directions must not repeat".into());
        }
        validate_offsets(&self.offsets, layout)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    /// Hex SHA-256 of the serialized configuration.
    pub fn fingerprint(&self) -> String {
        let text = toml::to_string(self).expect("train config serializes");
        hex(&Sha256::digest(text.as_bytes()))
    }
}

pub(crate) fn validate_offsets(offsets: &[usize], layout: &GridLayout) -> Result<()> {
    let s = layout.subpatches_per_patch_axis;
    if offsets.is_empty() {
        return Err(CpcError::Config("offsets K must not be empty".into()));
    }
    if offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CpcError::Config(format!("offsets {offsets:?} must be strictly increasing")));
    }
    if offsets[0] == 0 || offsets[offsets.len() - 1] >= s {
        return Err(CpcError::Config(format!(
            "offsets {offsets:?} must lie in 1..{s} for a {s}x{s} sub-patch grid"
        )));
    }
    Ok(())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One encoder with the predictors trained through it, plus optimizer state.
#[derive(Debug, Clone)]
pub struct ModelUnit {
    pub encoder: Encoder,
    pub predictors: Vec<DirectionalPredictor>,
    pub optimizer: Adam,
}

const SHARED_UNIT_ID: u64 = 0x5eed;

impl ModelUnit {
    fn seed_id(&self, shared: bool) -> u64 {
        if shared {
            SHARED_UNIT_ID
        } else {
            self.predictors[0].direction.index() as u64
        }
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.predictors.iter().map(|p| p.direction).collect()
    }
}

fn params_mut<'a>(
    encoder: &'a mut Encoder,
    predictors: &'a mut [DirectionalPredictor],
) -> Vec<(String, &'a mut Param)> {
    let mut out = Vec::new();
    encoder.collect_mut("encoder", &mut out);
    for p in predictors.iter_mut() {
        let prefix = format!("predictor.{}", p.direction.name());
        p.collect_mut(&prefix, &mut out);
    }
    out
}

impl Stateful for ModelUnit {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.encoder.collect(&crate::nn::join(prefix, "encoder"), out);
        for p in &self.predictors {
            let name = format!("predictor.{}", p.direction.name());
            p.collect(&crate::nn::join(prefix, &name), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (name, p) in params_mut(&mut self.encoder, &mut self.predictors) {
            out.push((crate::nn::join(prefix, &name), p));
        }
    }
}

/// Everything needed to score a class: trained units plus the configuration
/// they were trained under.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub class_name: String,
    pub grid: GridSpec,
    pub encoder_config: EncoderConfig,
    pub train_config: TrainConfig,
    pub units: Vec<ModelUnit>,
    pub epochs_completed: usize,
    /// Mean training loss per completed epoch, one column per unit.
    pub loss_history: Vec<Vec<f64>>,
}

impl ModelBundle {
    pub fn new(
        class_name: &str,
        grid: GridSpec,
        encoder_config: EncoderConfig,
        train_config: TrainConfig,
    ) -> Result<Self> {
        let layout = plan_grid(grid)?;
        encoder_config.validate()?;
        train_config.validate(&layout)?;
        check_encoder_fits(&grid, &encoder_config)?;
        let groups: Vec<(u64, Vec<Direction>)> = if train_config.share_encoder {
            vec![(SHARED_UNIT_ID, train_config.directions.clone())]
        } else {
            train_config
                .directions
                .iter()
                .map(|&d| (d.index() as u64, vec![d]))
                .collect()
        };
        let units = groups
            .into_iter()
            .map(|(id, dirs)| {
                let encoder = init_encoder(encoder_config, mix_seed(train_config.seed, &[0xe7c, id]))?;
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(train_config.seed, &[0x9ed, id]));
                let predictors = dirs
                    .into_iter()
                    .map(|d| {
                        DirectionalPredictor::new(d, &train_config.offsets, encoder_config.embedding_dim, &mut rng)
                    })
                    .collect();
                Ok(ModelUnit {
                    encoder,
                    predictors,
                    optimizer: Adam::new(train_config.adam()),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            class_name: class_name.to_string(),
            grid,
            encoder_config,
            train_config,
            units,
            epochs_completed: 0,
            loss_history: Vec::new(),
        })
    }

    pub fn layout(&self) -> Result<GridLayout> {
        plan_grid(self.grid)
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.units.iter().flat_map(ModelUnit::directions).collect()
    }

    /// The encoder and predictor serving `direction`.
    pub fn model_for(&self, direction: Direction) -> Option<(usize, &Encoder, &DirectionalPredictor)> {
        self.units.iter().enumerate().find_map(|(i, u)| {
            u.predictors
                .iter()
                .find(|p| p.direction == direction)
                .map(|p| (i, &u.encoder, p))
        })
    }

    /// Hex SHA-256 over configs and every weight, identifying this exact model.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.class_name.as_bytes());
        h.update(self.train_config.fingerprint().as_bytes());
        h.update(toml::to_string(&self.grid).expect("grid serializes").as_bytes());
        h.update(toml::to_string(&self.encoder_config).expect("encoder serializes").as_bytes());
        for unit in &self.units {
            for (name, p) in unit.named_state() {
                h.update(name.as_bytes());
                for v in &p.value {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    pub fn validate(&self) -> Result<()> {
        let layout = plan_grid(self.grid)?;
        self.encoder_config.validate()?;
        self.train_config.validate(&layout)?;
        check_encoder_fits(&self.grid, &self.encoder_config)?;
        let mut have = self.directions();
        let mut want = self.train_config.directions.clone();
        have.sort();
        want.sort();
        if have != want {
            return Err(CpcError::Config(format!(
                "bundle holds directions {have:?} but its train config lists {want:?}"
            )));
        }
        if self.train_config.share_encoder && self.units.len() != 1 {
            return Err(CpcError::Config("shared-encoder bundle must hold exactly one encoder".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_encoder_fits(grid: &GridSpec, enc: &EncoderConfig) -> Result<()> {
    if grid.subpatch_side != enc.input_side {
        return Err(CpcError::Config(format!(
            "subpatch_side {} differs from encoder input_side {}",
            grid.subpatch_side, enc.input_side
        )));
    }
    Ok(())
}

fn check_train_split(train: &[ImageSample], side: usize) -> Result<()> {
    if train.is_empty() {
        return Err(CpcError::Config("training split is empty".into()));
    }
    for s in train {
        if s.label != Label::Normal || s.origin != Origin::Train {
            return Err(CpcError::Config(format!(
                "{} is not a defect-free training image",
                s.source_id
            )));
        }
        if s.pixels.height() != side || s.pixels.width() != side {
            return Err(CpcError::Shape(format!(
                "{} is {}x{}, the grid expects {side}x{side}",
                s.source_id,
                s.pixels.height(),
                s.pixels.width()
            )));
        }
    }
    Ok(())
}

/// Trains a fresh bundle for `cfg.epochs` epochs on `split.train`.
pub fn train_class(
    split: &DatasetSplit,
    grid: GridSpec,
    encoder_config: EncoderConfig,
    cfg: TrainConfig,
) -> Result<ModelBundle> {
    let mut bundle = ModelBundle::new(&split.class_name, grid, encoder_config, cfg)?;
    continue_training(&mut bundle, split, &mut |_| Ok(()))?;
    Ok(bundle)
}

/// Runs the remaining epochs up to `bundle.train_config.epochs`, calling
/// `on_epoch` after each one. Only `split.train` is read.
pub fn continue_training(
    bundle: &mut ModelBundle,
    split: &DatasetSplit,
    on_epoch: &mut dyn FnMut(&ModelBundle) -> Result<()>,
) -> Result<()> {
    bundle.validate()?;
    let layout = bundle.layout()?;
    let train = &split.train;
    check_train_split(train, layout.spec.image_side)?;
    let cfg = bundle.train_config.clone();
    let shared = cfg.share_encoder;
    while bundle.epochs_completed < cfg.epochs {
        let epoch = bundle.epochs_completed;
        let mut epoch_losses = Vec::with_capacity(bundle.units.len());
        for unit in bundle.units.iter_mut() {
            let id = unit.seed_id(shared);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, &[0x7a1, id, epoch as u64]));
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut steps = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                let images: Vec<&ImageSample> = batch.iter().map(|&i| &train[i]).collect();
                total += train_step(unit, &layout, &cfg, &images, &mut rng)?;
                steps += 1;
            }
            epoch_losses.push(total / steps as f64);
        }
        tracing::info!(epoch = epoch + 1, losses = ?epoch_losses, "epoch finished");
        bundle.loss_history.push(epoch_losses);
        bundle.epochs_completed += 1;
        on_epoch(bundle)?;
    }
    Ok(())
}

/// One optimization step; returns the mean loss of the batch.
fn train_step(
    unit: &mut ModelUnit,
    layout: &GridLayout,
    cfg: &TrainConfig,
    images: &[&ImageSample],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let side = layout.spec.subpatch_side;
    let mut data = Vec::with_capacity(images.len() * layout.blocks_per_image() * side * side);
    for sample in images {
        let pixels = if cfg.augment {
            augment_train(&sample.pixels, rng)
        } else {
            sample.pixels.clone()
        };
        data.extend(extract_subpatches(&pixels, layout)?.data);
    }
    let step = unit.optimizer.step as usize + 1;
    let z32 = unit.encoder.forward_train(&data, side)?;
    let d = unit.encoder.dim();
    let z: Vec<f64> = z32.iter().map(|&v| v as f64).collect();
    let rows = z.len() / d;
    let row = |i: usize| &z[i * d..(i + 1) * d];
    let bpi = layout.blocks_per_image();
    let p = layout.patches_per_axis;
    let s = layout.subpatches_per_patch_axis;

    let mut dz = vec![0.0f64; z.len()];
    let mut dws: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    let mut loss_sum = 0.0;
    let mut terms = 0usize;
    for (pi, pred) in unit.predictors.iter().enumerate() {
        for &k in &cfg.offsets {
            let w = pred.matrix_f64(k)?;
            let mut dw = vec![0.0; d * d];
            let pairs = directional_pairs(s, pred.direction, k)?;
            for img in 0..images.len() {
                for patch in (0..p).flat_map(|r| (0..p).map(move |c| (r, c))) {
                    for pair in &pairs {
                        let c = img * bpi + layout.block_index(patch, pair.context);
                        let t = img * bpi + layout.block_index(patch, pair.target);
                        let negs = sample_negative_indices(rows, Some(t), cfg.negatives, rng)?;
                        let ev = eval_pair(&w, row(c), row(t), negs.iter().map(|&j| row(j)));
                        loss_sum += ev.loss;
                        terms += 1;
                        let mut gu: Vec<f64> = row(t).iter().map(|v| v * ev.dlogits[0]).collect();
                        for (&j, &g) in negs.iter().zip(&ev.dlogits[1..]) {
                            for (acc, v) in gu.iter_mut().zip(row(j)) {
                                *acc += g * v;
                            }
                            for (acc, u) in dz[j * d..(j + 1) * d].iter_mut().zip(&ev.u) {
                                *acc += g * u;
                            }
                        }
                        for (acc, u) in dz[t * d..(t + 1) * d].iter_mut().zip(&ev.u) {
                            *acc += ev.dlogits[0] * u;
                        }
                        let ctx = row(c);
                        let dctx = &mut dz[c * d..(c + 1) * d];
                        for ((dw_row, w_row), &g) in dw.chunks_exact_mut(d).zip(w.chunks_exact(d)).zip(&gu) {
                            for ((cell, &cv), (acc, &wv)) in
                                dw_row.iter_mut().zip(ctx).zip(dctx.iter_mut().zip(w_row))
                            {
                                *cell += g * cv;
                                *acc += g * wv;
                            }
                        }
                    }
                }
            }
            dws.push((pi, k, dw));
        }
    }
    let loss = loss_sum / terms as f64;
    if !loss.is_finite() {
        return Err(CpcError::Divergence { step, loss });
    }
    let scale = 1.0 / terms as f64;
    let grad: Vec<f32> = dz.iter().map(|g| (g * scale) as f32).collect();
    unit.zero_grad();
    unit.encoder.backward(&grad);
    for (pi, k, dw) in dws {
        let m = unit.predictors[pi].matrix_mut(k)?;
        for (g, v) in m.grad.iter_mut().zip(&dw) {
            *g = (v * scale) as f32;
        }
    }
    let ModelUnit {
        encoder,
        predictors,
        optimizer,
    } = unit;
    let params = params_mut(encoder, predictors);
    if params.iter().any(|(_, p)| p.grad.iter().any(|g| !g.is_finite())) {
        return Err(CpcError::Divergence { step, loss: f64::NAN });
    }
    optimizer.update(params);
    Ok(loss)
}
