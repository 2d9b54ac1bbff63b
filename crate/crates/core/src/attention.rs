//! Scale-specific objectness attention and attention-gated window selection.
//!
//! Every pyramid level has its own small logistic network. Its input is the
//! descriptor of a cell together with the descriptors of the eight cells at
//! ±[`CONTEXT_STRIDE`] offsets around it (zeros outside the grid), so the
//! network sees roughly a window's worth of surroundings and can tell an
//! object of its own scale from a finer or coarser one.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::SceneSource;
use crate::error::{Error, Result};
use crate::geometry::Annotation;
use crate::nn::{bce, seeded_stream, Activation, DenseNet, TrainConfig, TrainLog};
use crate::parallel::ordered_map;
use crate::pyramid::{
    build_pyramid, level_dims, level_for_object, FeatureProvider, FeaturePyramid, PyramidLevel,
    WindowRef, LEVEL_FACTORS, WINDOW_SIZE,
};
use crate::scalar::Real;

/// Cell offset between the centre cell and its context cells.
pub const CONTEXT_STRIDE: usize = 4;
/// Centre plus eight neighbours.
pub const CONTEXT_CELLS: usize = 9;
/// Window-internal position of the cell that spawns a window.
pub const ANCHOR_OFFSET: usize = 4;

const INFERENCE_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap<T> {
    pub factor: u32,
    pub rows: usize,
    pub cols: usize,
    /// Row-major, values in `[0, 1]`.
    pub values: Vec<T>,
}

impl<T: Real> AttentionMap<T> {
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.cols + col]
    }

    pub fn filled(factor: u32, rows: usize, cols: usize, value: T) -> Self {
        Self { factor, rows, cols, values: vec![value; rows * cols] }
    }
}

/// One network per pyramid level, in [`LEVEL_FACTORS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionModel<T> {
    channels: usize,
    nets: Vec<DenseNet<T>>,
}

impl<T: Real> AttentionModel<T> {
    pub fn new(channels: usize, nets: Vec<DenseNet<T>>) -> Result<Self> {
        if nets.len() != LEVEL_FACTORS.len() {
            return Err(Error::Config(format!("attention needs 6 level networks, got {}", nets.len())));
        }
        for (net, factor) in nets.iter().zip(LEVEL_FACTORS) {
            let last = net.layers().last().expect("non-empty network");
            if net.input_dim() != CONTEXT_CELLS * channels
                || net.output_dim() != 1
                || last.activation != Activation::Logistic
            {
                return Err(Error::Config(format!(
                    "attention network for L{factor} must map {} inputs to one logistic output",
                    CONTEXT_CELLS * channels
                )));
            }
        }
        Ok(Self { channels, nets })
    }

    pub fn init(channels: usize, hidden: usize, scale: f64, seed: u64) -> Result<Self> {
        let nets = (0..LEVEL_FACTORS.len())
            .map(|li| {
                let mut rng = seeded_stream(seed, li as u64);
                DenseNet::init(
                    &[CONTEXT_CELLS * channels, hidden, 1],
                    &[Activation::Relu, Activation::Logistic],
                    scale,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        Self::new(channels, nets)
    }

    pub fn zeros(channels: usize, hidden: usize) -> Result<Self> {
        let nets = (0..LEVEL_FACTORS.len())
            .map(|_| {
                DenseNet::zeros(&[CONTEXT_CELLS * channels, hidden, 1], &[Activation::Relu, Activation::Logistic])
            })
            .collect::<Result<_>>()?;
        Self::new(channels, nets)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn nets(&self) -> &[DenseNet<T>] {
        &self.nets
    }

    pub fn is_finite(&self) -> bool {
        self.nets.iter().all(DenseNet::is_finite)
    }
}

/// Writes the context descriptor of `(row, col)` into `out`
/// (`CONTEXT_CELLS × channels` values).
pub fn context_features<T: Real>(level: &PyramidLevel<T>, row: usize, col: usize, out: &mut [T]) {
    let c = level.channels;
    let s = CONTEXT_STRIDE as isize;
    let mut k = 0;
    for dr in [-s, 0, s] {
        for dc in [-s, 0, s] {
            let (r, cc) = (row as isize + dr, col as isize + dc);
            let dst = &mut out[k * c..(k + 1) * c];
            if r >= 0 && cc >= 0 && (r as usize) < level.rows && (cc as usize) < level.cols {
                dst.copy_from_slice(level.cell(r as usize, cc as usize));
            } else {
                dst.iter_mut().for_each(|v| *v = T::zero());
            }
            k += 1;
        }
    }
}

/// Binary target grid of level `factor` (row-major `rows × cols`): a cell is
/// positive iff its centre lies inside an annotation assigned to this level.
pub fn attention_targets<T: Real>(
    annotations: &[Annotation<T>],
    image_width: u32,
    image_height: u32,
    factor: u32,
) -> Vec<bool> {
    let (rows, cols) = level_dims(image_width, image_height, factor);
    let mut grid = vec![false; rows * cols];
    let n = factor as f64;
    let center = |i: usize| T::lit((i as f64 + 0.5) * n);
    for a in annotations.iter().filter(|a| level_for_object(&a.bbox) == factor) {
        let b = &a.bbox;
        // candidate span, one cell wider on each side than strictly needed;
        // membership itself is decided by the exact centre test below
        let span = |lo: T, hi: T, len: usize| {
            let lo = (lo.as_f64() / n - 1.5).floor().max(0.0) as usize;
            let hi = ((hi.as_f64() / n + 0.5).ceil().max(0.0) as usize).min(len);
            lo.min(len)..hi
        };
        for r in span(b.y_min, b.y_max, rows) {
            for c in span(b.x_min, b.x_max, cols) {
                if b.contains_point(center(c), center(r)) {
                    grid[r * cols + c] = true;
                }
            }
        }
    }
    grid
}

fn check_channels<T: Real>(pyramid: &FeaturePyramid<T>, model: &AttentionModel<T>) -> Result<()> {
    if pyramid.channels != model.channels {
        return Err(Error::Config(format!(
            "attention model expects {} channels, pyramid has {}",
            model.channels, pyramid.channels
        )));
    }
    Ok(())
}

/// Attention maps for all six levels, finest first.
pub fn compute_attention<T: Real>(
    pyramid: &FeaturePyramid<T>,
    model: &AttentionModel<T>,
) -> Result<Vec<AttentionMap<T>>> {
    check_channels(pyramid, model)?;
    let dim = CONTEXT_CELLS * model.channels;
    pyramid
        .levels()
        .iter()
        .zip(&model.nets)
        .map(|(level, net)| {
            let total = level.rows * level.cols;
            let mut values = Vec::with_capacity(total);
            let mut buf = vec![T::zero(); INFERENCE_CHUNK * dim];
            let mut start = 0;
            while start < total {
                let len = INFERENCE_CHUNK.min(total - start);
                for i in 0..len {
                    let cell = start + i;
                    context_features(level, cell / level.cols, cell % level.cols, &mut buf[i * dim..(i + 1) * dim]);
                }
                values.extend(net.predict_batch(&buf[..len * dim], len)?);
                start += len;
            }
            Ok(AttentionMap { factor: level.factor, rows: level.rows, cols: level.cols, values })
        })
        .collect()
}

/// Top-left anchor of the window spawned by an attended cell: the cell sits
/// at internal offset (4, 4) unless the window would leave the grid.
pub fn anchor_for_cell(row: usize, col: usize, rows: usize, cols: usize) -> (usize, usize) {
    let clamp = |i: usize, len: usize| i.saturating_sub(ANCHOR_OFFSET).min(len.saturating_sub(WINDOW_SIZE));
    (clamp(row, rows), clamp(col, cols))
}

/// Gated windows with their attention score (the best spawning cell),
/// sorted by descending score, at most `budget` of them.
pub fn gate_windows_scored<T: Real>(maps: &[AttentionMap<T>], tau: T, budget: usize) -> Vec<(WindowRef, T)> {
    let mut out = Vec::new();
    for map in maps {
        let mut best: Vec<Option<T>> = vec![None; map.rows * map.cols];
        for r in 0..map.rows {
            for c in 0..map.cols {
                let v = map.get(r, c);
                if v >= tau {
                    let (ar, ac) = anchor_for_cell(r, c, map.rows, map.cols);
                    let slot = &mut best[ar * map.cols + ac];
                    if slot.map_or(true, |b| v > b) {
                        *slot = Some(v);
                    }
                }
            }
        }
        for (i, s) in best.into_iter().enumerate() {
            if let Some(score) = s {
                out.push((WindowRef { factor: map.factor, row: i / map.cols, col: i % map.cols }, score));
            }
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite attention").then(a.0.cmp(&b.0)));
    out.truncate(budget);
    out
}

pub fn gate_windows<T: Real>(maps: &[AttentionMap<T>], tau: T, budget: usize) -> Vec<WindowRef> {
    gate_windows_scored(maps, tau, budget).into_iter().map(|(w, _)| w).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrainConfig {
    pub train: TrainConfig,
    pub hidden: usize,
    /// Positive cells kept per level and image (subsampled beyond this).
    pub max_positives: usize,
    /// Negatives drawn near annotations, per positive (at least 8 per level).
    pub near_negative_ratio: f64,
    /// Uniformly drawn negatives per level and image.
    pub random_negatives: usize,
    /// Half-width of the "near" region, in multiples of the box size.
    pub near_extent: f64,
}

impl Default for AttentionTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { learning_rate: 0.2, epochs: 12, batch_size: 64, seed: 42, ..TrainConfig::default() },
            hidden: 16,
            max_positives: 64,
            near_negative_ratio: 2.0,
            random_negatives: 48,
            near_extent: 1.5,
        }
    }
}

impl AttentionTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("attention hidden width must be >= 1".into()));
        }
        if !(self.near_negative_ratio >= 0.0 && self.near_extent >= 0.0) {
            return Err(Error::Config("attention sampling ratios must be >= 0".into()));
        }
        Ok(())
    }
}

/// Training cells of one level: features row-major, labels alongside.
#[derive(Default)]
struct LevelSamples<T> {
    features: Vec<T>,
    labels: Vec<bool>,
}

fn sample_image<T: Real>(
    pyramid: &FeaturePyramid<T>,
    annotations: &[Annotation<T>],
    config: &AttentionTrainConfig,
    image_index: usize,
) -> Vec<LevelSamples<T>> {
    let dim = CONTEXT_CELLS * pyramid.channels;
    let stream = (image_index as u64) << 8;
    pyramid
        .levels()
        .iter()
        .enumerate()
        .map(|(li, level)| {
            let mut rng = seeded_stream(config.train.seed, stream | (0x80 + li as u64));
            let targets = attention_targets(annotations, pyramid.width, pyramid.height, level.factor);
            let n = level.factor as f64;
            let mut positives: Vec<usize> = (0..targets.len()).filter(|&i| targets[i]).collect();
            if positives.len() > config.max_positives {
                positives.shuffle(&mut rng);
                positives.truncate(config.max_positives);
                positives.sort_unstable();
            }
            let mut near = Vec::new();
            for a in annotations {
                let (cx, cy) = a.bbox.center();
                let half_w = a.bbox.width().as_f64() * (0.5 + config.near_extent);
                let half_h = a.bbox.height().as_f64() * (0.5 + config.near_extent);
                let (cx, cy) = (cx.as_f64(), cy.as_f64());
                let r0 = ((cy - half_h) / n).floor().max(0.0) as usize;
                let r1 = (((cy + half_h) / n).ceil().max(0.0) as usize).min(level.rows);
                let c0 = ((cx - half_w) / n).floor().max(0.0) as usize;
                let c1 = (((cx + half_w) / n).ceil().max(0.0) as usize).min(level.cols);
                for r in r0.min(r1)..r1 {
                    for c in c0.min(c1)..c1 {
                        let i = r * level.cols + c;
                        if !targets[i] {
                            near.push(i);
                        }
                    }
                }
            }
            near.sort_unstable();
            near.dedup();
            near.shuffle(&mut rng);
            let want = ((positives.len() as f64 * config.near_negative_ratio).ceil() as usize).max(8);
            near.truncate(want);
            let total = targets.len();
            let mut random = Vec::with_capacity(config.random_negatives);
            for _ in 0..config.random_negatives.min(total) {
                let i = rng.gen_range(0..total);
                if !targets[i] {
                    random.push(i);
                }
            }
            let mut out = LevelSamples::default();
            let mut buf = vec![T::zero(); dim];
            for (cells, label) in [(&positives, true), (&near, false), (&random, false)] {
                for &i in cells {
                    context_features(level, i / level.cols, i % level.cols, &mut buf);
                    out.features.extend_from_slice(&buf);
                    out.labels.push(label);
                }
            }
            out
        })
        .collect()
}

/// Trains the six level networks on cells of every dataset image, with
/// class-balanced binary cross-entropy and minibatch SGD.
pub fn train_attention<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    config: &AttentionTrainConfig,
) -> Result<(AttentionModel<T>, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("attention training needs a non-empty dataset".into()));
    }
    let channels = backbone.channels();
    let mut model = AttentionModel::init(channels, config.hidden, config.train.init_scale, config.train.seed)?;
    if config.train.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let per_image = ordered_map(dataset.len(), |i| -> Result<Vec<LevelSamples<T>>> {
        let img = dataset.image(i)?;
        let pyramid = build_pyramid(&img, backbone)?;
        Ok(sample_image(&pyramid, &dataset.records()[i].annotations, config, i))
    });
    let mut levels: Vec<LevelSamples<T>> = (0..LEVEL_FACTORS.len()).map(|_| LevelSamples::default()).collect();
    for image in per_image {
        for (acc, s) in levels.iter_mut().zip(image?) {
            acc.features.extend(s.features);
            acc.labels.extend(s.labels);
        }
    }
    let dim = CONTEXT_CELLS * channels;
    let mut epoch_losses = vec![0.0; config.train.epochs];
    let total: usize = levels.iter().map(|l| l.labels.len()).sum();
    for (li, (net, samples)) in model.nets.iter_mut().zip(&levels).enumerate() {
        let losses = train_level(net, samples, dim, &config.train, li as u64)?;
        for (e, l) in losses.into_iter().enumerate() {
            epoch_losses[e] += l * samples.labels.len() as f64 / total.max(1) as f64;
        }
    }
    if !model.is_finite() {
        return Err(Error::Training("attention weights diverged".into()));
    }
    Ok((model, TrainLog { epoch_losses }))
}

fn train_level<T: Real>(
    net: &mut DenseNet<T>,
    samples: &LevelSamples<T>,
    dim: usize,
    train: &TrainConfig,
    level: u64,
) -> Result<Vec<f64>> {
    let n = samples.labels.len();
    if n == 0 {
        return Ok(vec![0.0; train.epochs]);
    }
    let positives = samples.labels.iter().filter(|&&l| l).count();
    let negatives = n - positives;
    let weight = |label: bool| -> f64 {
        let count = if label { positives } else { negatives };
        let classes = (positives > 0) as usize + (negatives > 0) as usize;
        n as f64 / (classes as f64 * count as f64)
    };
    let (w_pos, w_neg) = (weight(true), weight(false));
    let mut rng = seeded_stream(train.seed, 0x1000 + level);
    let mut order: Vec<usize> = (0..n).collect();
    let mut losses = Vec::with_capacity(train.epochs);
    let lr = T::lit(train.learning_rate);
    let mut batch = Vec::with_capacity(train.batch_size * dim);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(train.batch_size) {
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(&samples.features[i * dim..(i + 1) * dim]);
            }
            let cache = net.forward_batch(&batch, chunk.len())?;
            let inv = 1.0 / chunk.len() as f64;
            let grad: Vec<T> = chunk
                .iter()
                .zip(cache.output())
                .map(|(&i, &p)| {
                    let label = samples.labels[i];
                    let w = if label { w_pos } else { w_neg };
                    let y = if label { T::one() } else { T::zero() };
                    epoch_loss += w * bce(p, y).as_f64();
                    T::lit(w * inv) * (p - y)
                })
                .collect();
            let grads = net.backward_preactivation(&cache, &grad)?;
            net.sgd_step(&grads, lr)?;
        }
        losses.push(epoch_loss / n as f64);
    }
    Ok(losses)
}

/// Attention of one cell, evaluated directly (used by tests and diagnostics).
pub fn cell_attention<T: Real>(
    pyramid: &FeaturePyramid<T>,
    model: &AttentionModel<T>,
    level_index: usize,
    row: usize,
    col: usize,
) -> Result<T> {
    check_channels(pyramid, model)?;
    let level = &pyramid.levels()[level_index];
    let mut x = vec![T::zero(); CONTEXT_CELLS * model.channels];
    context_features(level, row, col, &mut x);
    Ok(model.nets[level_index].predict_batch(&x, 1)?[0])
}
