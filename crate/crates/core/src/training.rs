//! Depth-weighted training loss, augmentation and the optimisation loop.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{log_softmax_at, Graph};
use crate::grid::VoxelGrid;
use crate::model::{Model, ModelConfig, Prepared};
use crate::octree::build_octree;
use crate::params::Grads;
use crate::scheme::plan_groups;
use crate::sequence::{linearize, TokenSequence};
use crate::tensor::Tensor;
use crate::transformer::Dropout;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Chance that a training shape is warped in a given epoch.
    pub probability: f64,
    /// Interior control points per axis.
    pub control_points: usize,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.0,
            control_points: 2,
            scale_min: 0.75,
            scale_max: 1.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    /// Stops early once this many optimizer steps ran (0 = no limit).
    pub max_steps: usize,
    pub batch_size: usize,
    /// Depth weight factor: depth `d` gets raw weight `alpha^(d-1)`.
    pub alpha: f64,
    /// Shapes compressing to more latents are skipped.
    pub max_length: usize,
    pub temperature: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_fraction: 0.1,
            epochs: 10,
            max_steps: 0,
            batch_size: 4,
            alpha: 1.0,
            max_length: 3400,
            temperature: 0.8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.max_length < 1 || self.batch_size < 1 {
            return bad("max_length and batch_size must be at least 1");
        }
        if !(self.learning_rate >= 0.0) || !(self.temperature >= 0.0) {
            return bad("learning_rate and temperature must be non-negative");
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.probability) || !(0.0 < a.scale_min && a.scale_min <= a.scale_max) {
            return bad("augment probability must lie in [0, 1] and 0 < scale_min <= scale_max");
        }
        Ok(())
    }
}

/// Model and training settings as stored in one TOML file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Per-token weights `alpha^(d-1)`, rescaled so their mean is exactly one.
pub fn depth_weights(depths: &[u32], alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = depths.iter().map(|&d| alpha.powi(d as i32 - 1)).collect();
    let total: f64 = raw.iter().sum();
    let scale = depths.len() as f64 / total;
    raw.iter().map(|w| w * scale).collect()
}

/// Mean weighted negative log-likelihood (natural log) of `targets` under `logits`.
pub fn depth_weighted_nll(logits: &Tensor, targets: &[usize], depths: &[u32], alpha: f64) -> Result<f64> {
    if logits.rows() != targets.len() || targets.len() != depths.len() {
        return Err(Error::Shape(format!(
            "{} logit rows, {} targets, {} depths",
            logits.rows(),
            targets.len(),
            depths.len()
        )));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument("alpha must be positive".into()));
    }
    if targets.is_empty() {
        return Ok(0.0);
    }
    let w = depth_weights(depths, alpha);
    let total: f64 = (0..targets.len())
        .map(|i| w[i] * -log_softmax_at(logits.row(i), targets[i]))
        .sum();
    Ok(total / targets.len() as f64)
}

/// Monotone piecewise-linear map of `[0, res]` onto itself: source segments of
/// equal width, slopes drawn from the scale range and renormalised.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisWarp {
    /// Knots in source space and their images, both starting at 0 and ending at `res`.
    pub src: Vec<f64>,
    pub dst: Vec<f64>,
}

impl AxisWarp {
    pub fn random(res: u32, cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let r = res as f64;
        let segs = cfg.control_points + 1;
        let width = r / segs as f64;
        let slopes: Vec<f64> = (0..segs)
            .map(|_| {
                if cfg.scale_min == cfg.scale_max {
                    cfg.scale_min
                } else {
                    rng.gen_range(cfg.scale_min..=cfg.scale_max)
                }
            })
            .collect();
        let total: f64 = slopes.iter().map(|s| s * width).sum();
        let mut src = vec![0.0];
        let mut dst = vec![0.0];
        for (i, s) in slopes.iter().enumerate() {
            src.push(if i + 1 == segs { r } else { width * (i + 1) as f64 });
            let next = dst[i] + s * width * r / total;
            dst.push(if i + 1 == segs { r } else { next });
        }
        Self { src, dst }
    }

    /// Source coordinate mapped to `u` (inverse of the warp).
    pub fn source_of(&self, u: f64) -> f64 {
        let k = self.dst.windows(2).position(|w| u <= w[1]).unwrap_or(self.dst.len() - 2);
        let (d0, d1) = (self.dst[k], self.dst[k + 1]);
        let (s0, s1) = (self.src[k], self.src[k + 1]);
        if d1 == d0 {
            return s0;
        }
        s0 + (u - d0) * (s1 - s0) / (d1 - d0)
    }
}

/// Warps each axis independently; occupancy is resampled by nearest source voxel.
pub fn augment(grid: &VoxelGrid, seed: u64, cfg: &AugmentConfig) -> VoxelGrid {
    let res = grid.resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let warps: Vec<AxisWarp> = (0..3).map(|_| AxisWarp::random(res, cfg, &mut rng)).collect();
    let lookup: Vec<Vec<u32>> = warps
        .iter()
        .map(|w| {
            (0..res)
                .map(|i| (w.source_of(i as f64 + 0.5).floor().max(0.0) as u32).min(res - 1))
                .collect()
        })
        .collect();
    VoxelGrid::from_fn(res, |x, y, z| {
        grid.get(lookup[0][x as usize], lookup[1][y as usize], lookup[2][z as usize])
    })
    .expect("same resolution")
}

/// Learning rate at optimizer step `step` (0-based): linear ramp, then flat.
pub fn learning_rate(peak: f64, step: usize, total_steps: usize, warmup_fraction: f64) -> f64 {
    let warmup = ((total_steps as f64 * warmup_fraction).ceil() as usize).max(1);
    if step < warmup {
        peak * (step + 1) as f64 / warmup as f64
    } else {
        peak
    }
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Grads,
    v: Grads,
    t: i32,
}

impl Adam {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: model.store.zeros_like(),
            v: model.store.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = model.store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let g = grads.get(id).data();
            let m = self.m.get_mut(id).data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            }
            let v = self.v.get_mut(id).data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            }
            let (m, v) = (self.m.get(id).data(), self.v.get(id).data());
            let p = model.store.get_mut(id).data_mut();
            for i in 0..p.len() {
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
            }
        }
    }
}

/// A shape ready for training.
#[derive(Clone, Debug)]
pub struct Example {
    pub grid: VoxelGrid,
    pub class: Option<u32>,
}

pub fn sequence_of(grid: &VoxelGrid, class: Option<u32>) -> Result<TokenSequence> {
    let mut seq = linearize(&build_octree(grid)?);
    seq.class_label = class;
    Ok(seq)
}

/// Loss, summed token NLL in nats and gradients of one sequence.
pub fn sequence_gradients(
    model: &Model,
    prep: &Prepared,
    alpha: f64,
    dropout: Option<&mut Dropout>,
) -> Result<(f64, f64, Grads)> {
    let mut g = Graph::new(&model.store);
    let logits = model.forward(&mut g, prep, dropout)?;
    let weights = depth_weights(&prep.depths, alpha);
    let loss = g.weighted_nll(logits, prep.targets.clone(), weights);
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let lv = g.value(logits);
    let nll: f64 = prep
        .targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -log_softmax_at(lv.row(i), t))
        .sum();
    Ok((value, nll, g.backward(loss)))
}

/// Mean over tokens of `-log2 p(target)`, without depth weighting.
pub fn bits_per_token(model: &Model, sequences: &[TokenSequence]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::EmptyDataset("no sequences to score".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in sequences {
        let prep = model.prepare(seq)?;
        let logits = {
            let mut g = Graph::new(&model.store);
            let v = model.forward(&mut g, &prep, None)?;
            g.value(v).clone()
        };
        total += prep
            .targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -log_softmax_at(logits.row(i), t))
            .sum::<f64>();
        count += prep.targets.len();
    }
    Ok(total / count as f64 / std::f64::consts::LN_2)
}

/// Bits per token from per-token target probabilities.
pub fn bits_from_probabilities(p: &[f64]) -> f64 {
    p.iter().map(|p| -p.log2()).sum::<f64>() / p.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub bits_per_token: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub steps: usize,
    pub kept: usize,
    pub filtered: usize,
}

/// Trains `model` in place. Shapes whose compressed length exceeds the limit
/// are skipped; `metrics` receives one CSV row per epoch.
pub fn train(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let limit = cfg.max_length.min(model.config.max_positions - 1);
    let mut kept = Vec::new();
    for ex in data {
        let seq = sequence_of(&ex.grid, ex.class)?;
        if seq.max_depth() > model.config.max_depth {
            return Err(Error::Shape(format!(
                "shape depth {} exceeds model depth {}",
                seq.max_depth(),
                model.config.max_depth
            )));
        }
        if plan_groups(&seq, &model.scheme).len() <= limit {
            kept.push((ex, model.prepare(&seq)?));
        }
    }
    let filtered = data.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "all {} shapes exceed the compressed length limit {limit}",
            data.len()
        )));
    }

    let per_epoch = kept.len().div_ceil(cfg.batch_size);
    let mut total_steps = cfg.epochs * per_epoch;
    if cfg.max_steps > 0 {
        total_steps = total_steps.min(cfg.max_steps);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg);
    let mut writer = metrics.map(csv::Writer::from_writer);
    let mut epochs = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..kept.len()).collect();

    'outer: for epoch in 0..cfg.epochs {
        if step >= total_steps {
            break;
        }
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut nll_sum, mut tokens, mut lr) = (0.0, 0, 0.0, 0usize, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.store.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (ex, prep) = &kept[i];
                let warped;
                let augmented = if rng.gen::<f64>() < cfg.augment.probability {
                    let grid = augment(&ex.grid, rng.gen(), &cfg.augment);
                    let seq = sequence_of(&grid, ex.class)?;
                    warped = (plan_groups(&seq, &model.scheme).len() <= limit)
                        .then(|| model.prepare(&seq))
                        .transpose()?;
                    warped.as_ref()
                } else {
                    None
                };
                let prep = augmented.unwrap_or(prep);
                let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.gen());
                let mut dropout = Dropout {
                    rate: model.config.dropout,
                    rng: &mut drop_rng,
                };
                let (loss, nll, g) = sequence_gradients(model, prep, cfg.alpha, Some(&mut dropout))?;
                grads.add(&g);
                batch_loss += loss;
                nll_sum += nll;
                tokens += prep.targets.len();
            }
            grads.scale(1.0 / batch.len() as f64);
            if !grads.all_finite() {
                return Err(Error::NonFinite("gradients".into()));
            }
            lr = learning_rate(cfg.learning_rate, step, total_steps, cfg.warmup_fraction);
            adam.step(model, &grads, lr);
            step += 1;
            loss_sum += batch_loss / batch.len() as f64;
            batches += 1;
            if step >= total_steps {
                record(&mut epochs, &mut writer, epoch, step, loss_sum / batches as f64, nll_sum, tokens, lr)?;
                break 'outer;
            }
        }
        record(&mut epochs, &mut writer, epoch, step, loss_sum / batches as f64, nll_sum, tokens, lr)?;
    }
    if let Some(w) = writer.as_mut() {
        w.flush()?;
    }
    Ok(TrainReport {
        epochs,
        steps: step,
        kept: kept.len(),
        filtered,
    })
}

#[allow(clippy::too_many_arguments)]
fn record<W: Write>(
    epochs: &mut Vec<EpochMetrics>,
    writer: &mut Option<csv::Writer<W>>,
    epoch: usize,
    step: usize,
    loss: f64,
    nll: f64,
    tokens: usize,
    lr: f64,
) -> Result<()> {
    let m = EpochMetrics {
        epoch,
        step,
        loss,
        bits_per_token: nll / tokens.max(1) as f64 / std::f64::consts::LN_2,
        lr,
    };
    if let Some(w) = writer.as_mut() {
        w.serialize(&m)?;
        w.flush()?;
    }
    epochs.push(m);
    Ok(())
}
