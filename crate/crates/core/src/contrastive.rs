//! InfoNCE over bilinear scores between sub-patch embeddings.
//!
//! For a context embedding `z_t`, a target `z_{t+k}` lying `k` sub-patches
//! away in one direction and `N-1` negatives `z_j`, the loss is
//!
//! ```text
//! L = -log( exp(z_{t+k}' W_k z_t) / (exp(z_{t+k}' W_k z_t) + sum_j exp(z_j' W_k z_t)) )
//! ```
//!
//! with no autoregressive context network and no temperature. The loss of a
//! pair is attributed to its target sub-patch.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CpcError, Result};
use crate::geometry::Cell;
use crate::nn::{join, Param, Stateful};

/// Where the context comes from relative to the predicted target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    FromAbove,
    FromBelow,
    FromLeft,
    FromRight,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::FromAbove,
        Direction::FromBelow,
        Direction::FromLeft,
        Direction::FromRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::FromAbove => "from_above",
            Direction::FromBelow => "from_below",
            Direction::FromLeft => "from_left",
            Direction::FromRight => "from_right",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Direction::ALL
            .into_iter()
            .find(|d| d.name() == name)
            .ok_or_else(|| CpcError::Config(format!("unknown direction `{name}`")))
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Context/target cell pair inside one patch's sub-grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridPair {
    pub context: Cell,
    pub target: Cell,
}

pub fn directional_pairs(side: usize, direction: Direction, k: usize) -> Result<Vec<GridPair>> {
    if k == 0 || k >= side {
        return Err(CpcError::Geometry(format!(
            "offset {k} does not fit a {side}x{side} sub-grid"
        )));
    }
    let mut pairs = Vec::with_capacity((side - k) * side);
    for a in 0..side - k {
        for b in 0..side {
            let pair = match direction {
                Direction::FromAbove => GridPair {
                    context: (a, b),
                    target: (a + k, b),
                },
                Direction::FromBelow => GridPair {
                    context: (a + k, b),
                    target: (a, b),
                },
                Direction::FromLeft => GridPair {
                    context: (b, a),
                    target: (b, a + k),
                },
                Direction::FromRight => GridPair {
                    context: (b, a + k),
                    target: (b, a),
                },
            };
            pairs.push(pair);
        }
    }
    Ok(pairs)
}

/// The `W_k` matrices for one direction, stored row-major `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalPredictor {
    pub direction: Direction,
    pub dim: usize,
    matrices: BTreeMap<usize, Param>,
}

impl DirectionalPredictor {
    /// Entries drawn from `U(-1/sqrt(d), 1/sqrt(d))`.
    pub fn new(direction: Direction, offsets: &[usize], dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let matrices = offsets
            .iter()
            .map(|&k| {
                let values = (0..dim * dim)
                    .map(|_| rng.random_range(-bound..bound) as f32)
                    .collect();
                (k, Param::new(vec![dim, dim], values))
            })
            .collect();
        Self {
            direction,
            dim,
            matrices,
        }
    }

    pub fn from_matrices(direction: Direction, dim: usize, matrices: BTreeMap<usize, Vec<f32>>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (k, values) in matrices {
            if values.len() != dim * dim {
                return Err(CpcError::Shape(format!(
                    "W_{k} has {} entries, expected {}",
                    values.len(),
                    dim * dim
                )));
            }
            out.insert(k, Param::new(vec![dim, dim], values));
        }
        Ok(Self {
            direction,
            dim,
            matrices: out,
        })
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.matrices.keys().copied().collect()
    }

    pub fn matrix(&self, k: usize) -> Result<&Param> {
        self.matrices.get(&k).ok_or_else(|| {
            CpcError::Config(format!(
                "{} predictor has no matrix for offset {k} (has {:?})",
                self.direction,
                self.offsets()
            ))
        })
    }

    pub fn matrix_mut(&mut self, k: usize) -> Result<&mut Param> {
        let direction = self.direction;
        self.matrices
            .get_mut(&k)
            .ok_or_else(|| CpcError::Config(format!("{direction} predictor has no offset {k}")))
    }

    pub fn matrix_f64(&self, k: usize) -> Result<Vec<f64>> {
        Ok(self.matrix(k)?.value.iter().map(|&v| v as f64).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.matrices.values().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

impl Stateful for DirectionalPredictor {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (k, p) in &self.matrices {
            out.push((join(prefix, &format!("k{k}")), p));
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (k, p) in self.matrices.iter_mut() {
            out.push((join(prefix, &format!("k{k}")), p));
        }
    }
}

/// One positive pair and its negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub k: usize,
    pub direction: Direction,
}

impl ContrastiveBatch {
    pub fn validate(&self) -> Result<()> {
        let d = self.context.len();
        if self.negatives.is_empty() {
            return Err(CpcError::Sampling("InfoNCE needs at least one negative".into()));
        }
        if self.target.len() != d || self.negatives.iter().any(|n| n.len() != d) {
            return Err(CpcError::Shape("context, target and negatives must share one dimension".into()));
        }
        Ok(())
    }
}

/// `a' W b` for row-major `W`.
pub fn bilinear_score(a: &[f64], b: &[f64], w: &[f64]) -> Result<f64> {
    let d = a.len();
    if b.len() != d || w.len() != d * d {
        return Err(CpcError::Shape(format!(
            "bilinear score of {}-vector and {}-vector through {} weights",
            a.len(),
            b.len(),
            w.len()
        )));
    }
    Ok(w.chunks_exact(d)
        .zip(a)
        .map(|(row, ai)| ai * dot(row, b))
        .sum())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `W x` for row-major `d x d` `W`.
pub(crate) fn mat_vec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks_exact(x.len()).map(|row| dot(row, x)).collect()
}

/// `-log softmax(logits)[0]` where `logits = [positive, negatives...]`,
/// evaluated as `logsumexp(logits) - positive`.
pub fn infonce_from_logits(positive: f64, negatives: &[f64]) -> f64 {
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(positive);
    logits.extend_from_slice(negatives);
    let (max, total) = sum_exp(&logits);
    // Clamp tiny negative round-off when the positive dominates.
    (max + total.ln() - positive).max(0.0)
}

/// Returns `(max, sum(exp(s - max)))`, summing in sorted order so the result
/// does not depend on the order of the negatives.
fn sum_exp(logits: &[f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    exps.sort_by(f64::total_cmp);
    (max, exps.iter().sum())
}

pub fn infonce_loss(batch: &ContrastiveBatch, predictor: &DirectionalPredictor) -> Result<f64> {
    batch.validate()?;
    if batch.direction != predictor.direction {
        return Err(CpcError::Config(format!(
            "{} batch scored by {} predictor",
            batch.direction, predictor.direction
        )));
    }
    let w = predictor.matrix_f64(batch.k)?;
    if batch.context.len() != predictor.dim {
        return Err(CpcError::Shape(format!(
            "{}-d embeddings against {}-d predictor",
            batch.context.len(),
            predictor.dim
        )));
    }
    let u = mat_vec(&w, &batch.context);
    let pos = dot(&batch.target, &u);
    let negs: Vec<f64> = batch.negatives.iter().map(|n| dot(n, &u)).collect();
    Ok(infonce_from_logits(pos, &negs))
}

/// Loss plus softmax weights for a single pair, with `u = W z_t` cached.
#[derive(Debug, Clone)]
pub(crate) struct PairEval {
    pub loss: f64,
    pub u: Vec<f64>,
    /// `softmax(logits)[0] - 1` for the positive, then `softmax(logits)[j]`.
    pub dlogits: Vec<f64>,
}

pub(crate) fn eval_pair<'a>(
    w: &[f64],
    context: &[f64],
    target: &[f64],
    negatives: impl ExactSizeIterator<Item = &'a [f64]>,
) -> PairEval {
    let u = mat_vec(w, context);
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(target, &u));
    logits.extend(negatives.map(|n| dot(n, &u)));
    let (max, total) = sum_exp(&logits);
    let exps: Vec<f64> = logits.iter().map(|s| (s - max).exp()).collect();
    let loss = (max + total.ln() - logits[0]).max(0.0);
    let mut dlogits: Vec<f64> = exps.iter().map(|e| e / total).collect();
    dlogits[0] -= 1.0;
    PairEval { loss, u, dlogits }
}

/// Analytic gradients of one InfoNCE term.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoNceGradient {
    pub loss: f64,
    /// Row-major `d x d`.
    pub w: Vec<f64>,
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn infonce_with_gradient(batch: &ContrastiveBatch, w: &[f64]) -> Result<InfoNceGradient> {
    batch.validate()?;
    let d = batch.context.len();
    if w.len() != d * d {
        return Err(CpcError::Shape(format!("{}-entry W for {d}-d embeddings", w.len())));
    }
    let eval = eval_pair(
        w,
        &batch.context,
        &batch.target,
        batch.negatives.iter().map(Vec::as_slice),
    );
    // dL/du = sum_i dlogit_i * z_i over positive and negatives.
    let mut gu: Vec<f64> = batch.target.iter().map(|v| v * eval.dlogits[0]).collect();
    for (n, g) in batch.negatives.iter().zip(&eval.dlogits[1..]) {
        for (acc, v) in gu.iter_mut().zip(n) {
            *acc += g * v;
        }
    }
    let mut gw = vec![0.0; d * d];
    for (row, gi) in gw.chunks_exact_mut(d).zip(&gu) {
        for (cell, c) in row.iter_mut().zip(&batch.context) {
            *cell = gi * c;
        }
    }
    let mut gctx = vec![0.0; d];
    for (row, gi) in w.chunks_exact(d).zip(&gu) {
        for (acc, wv) in gctx.iter_mut().zip(row) {
            *acc += gi * wv;
        }
    }
    Ok(InfoNceGradient {
        loss: eval.loss,
        w: gw,
        context: gctx,
        target: eval.u.iter().map(|v| v * eval.dlogits[0]).collect(),
        negatives: eval.dlogits[1..]
            .iter()
            .map(|g| eval.u.iter().map(|v| v * g).collect())
            .collect(),
    })
}

/// Draws `count` distinct indices from `0..candidates`, skipping `exclude`.
pub fn sample_negative_indices(
    candidates: usize,
    exclude: Option<usize>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let excluded = exclude.filter(|&e| e < candidates);
    let available = candidates - excluded.is_some() as usize;
    if available < count {
        return Err(CpcError::Sampling(format!(
            "need {count} negatives but only {available} candidates are available"
        )));
    }
    Ok(index::sample(rng, available, count)
        .into_iter()
        .map(|i| match excluded {
            Some(e) if i >= e => i + 1,
            _ => i,
        })
        .collect())
}

/// Draws `count` negatives uniformly without replacement from the rows of
/// `embeddings` (row-major, `dim` wide), never returning row `exclude`.
pub fn sample_negatives_train(
    embeddings: &[f64],
    dim: usize,
    exclude: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let rows = embeddings.len() / dim;
    let picked = sample_negative_indices(rows, Some(exclude), count, rng)?;
    Ok(picked
        .into_iter()
        .map(|i| embeddings[i * dim..(i + 1) * dim].to_vec())
        .collect())
}
