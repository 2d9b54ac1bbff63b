//! The detection stage: RoI pooling to 7×7, the fully-connected head with
//! state-or-background classification and class-agnostic box regression,
//! IoU-based sample assignment, training and inference.

use rand::seq::SliceRandom;

use crate::attention::AttentionModel;
use crate::data::SceneSource;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, Annotation, BBox};
use crate::nn::{seeded_stream, smooth_l1, softmax, softmax_cross_entropy, Activation, DenseNet, TrainConfig, TrainLog};
use crate::parallel::ordered_map;
use crate::proposer::{nms_indices, propose_pyramid, propose_windows, ProposerConfig, ProposerModel};
use crate::pyramid::{build_pyramid, FeatureProvider, FeaturePyramid, WindowRef, LEVEL_FACTORS};
use crate::scalar::Real;

/// Side of the pooled RoI grid.
pub const ROI_SIZE: usize = 7;
pub const ROI_CELLS: usize = ROI_SIZE * ROI_SIZE;
/// Bound on `|t_w|`, `|t_h|` when applying deltas.
pub const MAX_LOG_SCALE: f64 = 4.0;
/// Regression targets are divided by these before training.
pub const DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

const HEAD_CHUNK: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    /// Vocabulary index, never background.
    pub state: usize,
    pub confidence: T,
}

/// Pyramid level an RoI is pooled from: the power of two nearest (in log
/// scale) to `sqrt(area) / 7`, clamped to the pyramid.
pub fn roi_level<T: Real>(b: &BBox<T>) -> u32 {
    let ratio = b.area().as_f64().sqrt() / ROI_SIZE as f64;
    let exp = ratio.log2().round();
    let (lo, hi) = (LEVEL_FACTORS[0], LEVEL_FACTORS[LEVEL_FACTORS.len() - 1]);
    if !(exp.is_finite()) || exp <= (lo as f64).log2() {
        return lo;
    }
    if exp >= (hi as f64).log2() {
        return hi;
    }
    1u32 << exp as u32
}

/// Cell span `[lo, hi)` along one axis covered by `[start, end)` in cell
/// units, clamped to `len`; an empty span falls back to the nearest cell.
fn bin_span(start: f64, end: f64, len: usize) -> (usize, usize) {
    let lo = start.floor().max(0.0) as usize;
    let hi = (end.ceil().max(0.0) as usize).min(len);
    if lo < hi {
        (lo, hi)
    } else {
        let mid = (0.5 * (start + end)).floor().clamp(0.0, (len - 1) as f64) as usize;
        (mid, mid + 1)
    }
}

/// `7 × 7 × C` max-pooled features of `b` (cell-major).
pub fn roi_pool<T: Real>(pyramid: &FeaturePyramid<T>, b: &BBox<T>) -> Vec<T> {
    let mut out = vec![T::zero(); ROI_CELLS * pyramid.channels];
    roi_pool_into(pyramid, b, &mut out);
    out
}

fn roi_pool_into<T: Real>(pyramid: &FeaturePyramid<T>, b: &BBox<T>, out: &mut [T]) {
    let level = pyramid.level(roi_level(b)).expect("roi level is a pyramid level");
    let n = level.factor as f64;
    let c = level.channels;
    let (x0, y0) = (b.x_min.as_f64() / n, b.y_min.as_f64() / n);
    let (bw, bh) = ((b.x_max.as_f64() / n - x0) / ROI_SIZE as f64, (b.y_max.as_f64() / n - y0) / ROI_SIZE as f64);
    for i in 0..ROI_SIZE {
        let (r0, r1) = bin_span(y0 + i as f64 * bh, y0 + (i + 1) as f64 * bh, level.rows);
        for j in 0..ROI_SIZE {
            let (c0, c1) = bin_span(x0 + j as f64 * bw, x0 + (j + 1) as f64 * bw, level.cols);
            let dst = &mut out[(i * ROI_SIZE + j) * c..(i * ROI_SIZE + j + 1) * c];
            dst.copy_from_slice(level.cell(r0, c0));
            for r in r0..r1 {
                for cc in c0..c1 {
                    for (d, &v) in dst.iter_mut().zip(level.cell(r, cc)) {
                        *d = d.max(v);
                    }
                }
            }
        }
    }
}

/// `(t_x, t_y, t_w, t_h)` taking `anchor` to `target`.
pub fn compute_deltas<T: Real>(anchor: &BBox<T>, target: &BBox<T>) -> [T; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [(tx - ax) / aw, (ty - ay) / ah, (target.width() / aw).ln(), (target.height() / ah).ln()]
}

/// Inverse of [`compute_deltas`], with the log-scales clamped to `±4`.
/// The result is not clipped to the image.
pub fn apply_deltas<T: Real>(anchor: &BBox<T>, d: &[T; 4]) -> BBox<T> {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let lim = T::lit(MAX_LOG_SCALE);
    let (cx, cy) = (ax + d[0] * aw, ay + d[1] * ah);
    let w = aw * d[2].max(-lim).min(lim).exp();
    let h = ah * d[3].max(-lim).min(lim).exp();
    let half = T::lit(0.5);
    BBox { x_min: cx - half * w, y_min: cy - half * h, x_max: cx + half * w, y_max: cy + half * h }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Assignment<T> {
    Positive { annotation: usize, state: usize, deltas: [T; 4] },
    Background,
    Discarded,
}

/// Per proposal: IoU ≥ 0.5 with its best annotation is a positive of that
/// annotation's state, IoU < 0.3 is background, anything between is dropped.
pub fn assign_samples<T: Real>(proposals: &[BBox<T>], annotations: &[Annotation<T>]) -> Vec<Assignment<T>> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(T, usize)> = None;
            for (k, a) in annotations.iter().enumerate() {
                let v = iou(p, &a.bbox);
                if best.map_or(true, |(b, _)| v > b) {
                    best = Some((v, k));
                }
            }
            match best {
                Some((v, k)) if v >= T::lit(0.5) => Assignment::Positive {
                    annotation: k,
                    state: annotations[k].state,
                    deltas: compute_deltas(p, &annotations[k].bbox),
                },
                Some((v, _)) if v >= T::lit(0.3) => Assignment::Discarded,
                _ => Assignment::Background,
            }
        })
        .collect()
}

/// Head over the flattened `7 × 7 × C` RoI with `|S| + 1` class logits
/// (background last) followed by 4 box deltas.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel<T> {
    channels: usize,
    states: usize,
    pub net: DenseNet<T>,
}

impl<T: Real> DetectorModel<T> {
    pub fn new(channels: usize, states: usize, net: DenseNet<T>) -> Result<Self> {
        if states == 0 {
            return Err(Error::Config("detector needs at least one state".into()));
        }
        if net.input_dim() != ROI_CELLS * channels || net.output_dim() != states + 5 {
            return Err(Error::Config(format!(
                "detector head must map {} inputs to {} outputs",
                ROI_CELLS * channels,
                states + 5
            )));
        }
        if net.layers().last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Config("detector head must end in an identity layer".into()));
        }
        Ok(Self { channels, states, net })
    }

    fn dims(channels: usize, states: usize, hidden: &[usize]) -> (Vec<usize>, Vec<Activation>) {
        let mut dims = vec![ROI_CELLS * channels];
        dims.extend_from_slice(hidden);
        dims.push(states + 5);
        let mut acts = vec![Activation::Relu; hidden.len()];
        acts.push(Activation::Identity);
        (dims, acts)
    }

    pub fn init(channels: usize, states: usize, hidden: &[usize], scale: f64, seed: u64) -> Result<Self> {
        let (dims, acts) = Self::dims(channels, states, hidden);
        let mut rng = seeded_stream(seed, 0x4445);
        Self::new(channels, states, DenseNet::init(&dims, &acts, scale, &mut rng)?)
    }

    pub fn zeros(channels: usize, states: usize, hidden: &[usize]) -> Result<Self> {
        let (dims, acts) = Self::dims(channels, states, hidden);
        Self::new(channels, states, DenseNet::zeros(&dims, &acts)?)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn states(&self) -> usize {
        self.states
    }

    /// Index of the background logit.
    pub fn background(&self) -> usize {
        self.states
    }

    pub fn input_dim(&self) -> usize {
        ROI_CELLS * self.channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectConfig {
    pub proposer: ProposerConfig,
    /// Highest-ranked proposals passed to the head.
    pub proposals: usize,
    /// Detections must score strictly above this.
    pub score_threshold: f64,
    pub nms: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self { proposer: ProposerConfig::default(), proposals: 300, score_threshold: 0.5, nms: 0.5 }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        self.proposer.validate()?;
        if !(0.0..=1.0).contains(&self.score_threshold) || !(0.0..=1.0).contains(&self.nms) {
            return Err(Error::Config("detector thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// RoI features of a set of boxes, ready for the head.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRois<T> {
    pub boxes: Vec<BBox<T>>,
    pub features: Vec<T>,
    pub width: u32,
    pub height: u32,
}

pub fn pool_rois<T: Real>(pyramid: &FeaturePyramid<T>, boxes: Vec<BBox<T>>) -> PooledRois<T> {
    let dim = ROI_CELLS * pyramid.channels;
    let mut features = vec![T::zero(); boxes.len() * dim];
    for (b, out) in boxes.iter().zip(features.chunks_exact_mut(dim)) {
        roi_pool_into(pyramid, b, out);
    }
    PooledRois { boxes, features, width: pyramid.width, height: pyramid.height }
}

/// Raw head outputs (`|S| + 5` per RoI).
pub fn head_outputs<T: Real>(model: &DetectorModel<T>, features: &[T], count: usize) -> Result<Vec<T>> {
    let dim = model.input_dim();
    if features.len() != count * dim {
        return Err(Error::Config(format!("RoI features hold {} values, expected {count} × {dim}", features.len())));
    }
    let mut out = Vec::with_capacity(count * (model.states + 5));
    for chunk in features.chunks(HEAD_CHUNK * dim) {
        out.extend(model.net.predict_batch(chunk, chunk.len() / dim)?);
    }
    Ok(out)
}

/// Classification, regression and post-processing of pooled proposals.
pub fn detect_pooled<T: Real>(model: &DetectorModel<T>, rois: &PooledRois<T>, config: &DetectConfig) -> Result<Vec<Detection<T>>> {
    let outputs = head_outputs(model, &rois.features, rois.boxes.len())?;
    let k = model.states + 5;
    let mut candidates: Vec<Detection<T>> = Vec::new();
    for (b, out) in rois.boxes.iter().zip(outputs.chunks_exact(k)) {
        let probs = softmax(&out[..model.states + 1]);
        let mut best = 0;
        for s in 1..probs.len() {
            if probs[s] > probs[best] {
                best = s;
            }
        }
        if best == model.background() {
            continue;
        }
        let d = &out[model.states + 1..];
        let deltas: [T; 4] = std::array::from_fn(|i| d[i] * T::lit(DELTA_STD[i]));
        if let Some(bbox) = clip_box(&apply_deltas(b, &deltas), rois.width, rois.height) {
            candidates.push(Detection { bbox, state: best, confidence: probs[best] });
        }
    }
    let mut kept = Vec::new();
    for state in 0..model.states {
        let group: Vec<&Detection<T>> = candidates.iter().filter(|d| d.state == state).collect();
        let boxes: Vec<_> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<_> = group.iter().map(|d| d.confidence).collect();
        for i in nms_indices(&boxes, &scores, T::lit(config.nms)) {
            kept.push(group[i].clone());
        }
    }
    let threshold = T::lit(config.score_threshold);
    kept.retain(|d| d.confidence > threshold);
    kept.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).expect("finite confidence").then(a.state.cmp(&b.state)));
    Ok(kept)
}

pub fn detect_pyramid<T: Real>(
    pyramid: &FeaturePyramid<T>,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    detector: &DetectorModel<T>,
    config: &DetectConfig,
) -> Result<Vec<Detection<T>>> {
    config.validate()?;
    if pyramid.channels != detector.channels {
        return Err(Error::Config("detector channel count does not match the pyramid".into()));
    }
    let mut proposals = propose_pyramid(pyramid, attention, proposer, &config.proposer)?;
    proposals.truncate(config.proposals);
    let rois = pool_rois(pyramid, proposals.into_iter().map(|p| p.bbox).collect());
    detect_pooled(detector, &rois, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorTrainConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    pub detect: DetectConfig,
    pub max_positives: usize,
    /// Background samples collected per positive (at least `min_background`).
    pub background_ratio: f64,
    pub min_background: usize,
    pub regression_weight: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { learning_rate: 0.01, epochs: 3, batch_size: 32, seed: 42, ..TrainConfig::default() },
            hidden: vec![2048; 4],
            detect: DetectConfig::default(),
            max_positives: 8,
            background_ratio: 3.0,
            min_background: 16,
            regression_weight: 1.0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.detect.validate()?;
        if self.hidden.contains(&0) {
            return Err(Error::Config("detector hidden layers must be non-empty".into()));
        }
        if self.train.batch_size < 4 {
            return Err(Error::Config("detector batches need room for one positive and three backgrounds".into()));
        }
        if !(self.background_ratio >= 0.0 && self.regression_weight >= 0.0) {
            return Err(Error::Config("detector ratios must be >= 0".into()));
        }
        Ok(())
    }
}

/// Training RoIs: class label (background = `states`) and normalised
/// regression target for positives.
#[derive(Debug, Clone, Default)]
pub struct DetectorSamples<T> {
    pub features: Vec<T>,
    pub labels: Vec<usize>,
    pub targets: Vec<Option<[T; 4]>>,
}

impl<T: Real> DetectorSamples<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    fn extend(&mut self, other: DetectorSamples<T>) {
        self.features.extend(other.features);
        self.labels.extend(other.labels);
        self.targets.extend(other.targets);
    }
}

fn sample_rois<T: Real>(
    pyramid: &FeaturePyramid<T>,
    proposals: &[BBox<T>],
    annotations: &[Annotation<T>],
    states: usize,
    config: &DetectorTrainConfig,
    image_index: usize,
) -> DetectorSamples<T> {
    let mut positives = Vec::new();
    let mut background = Vec::new();
    for (b, a) in proposals.iter().zip(assign_samples(proposals, annotations)) {
        match a {
            Assignment::Positive { state, deltas, .. } => positives.push((*b, state, Some(deltas))),
            Assignment::Background => background.push((*b, states, None)),
            Assignment::Discarded => {}
        }
    }
    let mut rng = seeded_stream(config.train.seed, 0x4445_0000 + image_index as u64);
    positives.shuffle(&mut rng);
    positives.truncate(config.max_positives);
    background.shuffle(&mut rng);
    let want = ((positives.len() as f64 * config.background_ratio).ceil() as usize).max(config.min_background);
    background.truncate(want);
    let dim = ROI_CELLS * pyramid.channels;
    let mut out = DetectorSamples::default();
    let mut buf = vec![T::zero(); dim];
    for (b, label, deltas) in positives.into_iter().chain(background) {
        roi_pool_into(pyramid, &b, &mut buf);
        out.features.extend_from_slice(&buf);
        out.labels.push(label);
        out.targets.push(deltas.map(|d| std::array::from_fn(|i| d[i] / T::lit(DELTA_STD[i]))));
    }
    out
}

/// Runs the trained proposal stack over the dataset and collects RoI samples.
pub fn collect_detector_samples<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    states: usize,
    config: &DetectorTrainConfig,
) -> Result<DetectorSamples<T>> {
    collect_detector_samples_gated(dataset, backbone, attention, proposer, states, config, None)
}

/// [`collect_detector_samples`] with optional precomputed gated windows per
/// image, as returned by [`crate::proposer::train_proposer_gated`] under the
/// same gating settings.
pub fn collect_detector_samples_gated<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    states: usize,
    config: &DetectorTrainConfig,
    gated: Option<&[Vec<WindowRef>]>,
) -> Result<DetectorSamples<T>> {
    config.validate()?;
    if gated.is_some_and(|g| g.len() != dataset.len()) {
        return Err(Error::Config("gated windows do not match the dataset".into()));
    }
    let per_image = ordered_map(dataset.len(), |i| -> Result<DetectorSamples<T>> {
        let img = dataset.image(i)?;
        let pyramid = build_pyramid(&img, backbone)?;
        let mut proposals = match gated {
            Some(g) => propose_windows(&pyramid, proposer, &g[i], &config.detect.proposer)?,
            None => propose_pyramid(&pyramid, attention, proposer, &config.detect.proposer)?,
        };
        proposals.truncate(config.detect.proposals);
        let boxes: Vec<_> = proposals.into_iter().map(|p| p.bbox).collect();
        Ok(sample_rois(&pyramid, &boxes, &dataset.records()[i].annotations, states, config, i))
    });
    let mut samples = DetectorSamples::default();
    for s in per_image {
        samples.extend(s?);
    }
    Ok(samples)
}

/// Minibatch SGD on collected samples. Each batch holds at most one
/// positive per three background RoIs; positives are cycled so every
/// background RoI is visited once per epoch.
pub fn fit_detector<T: Real>(
    channels: usize,
    states: usize,
    samples: &DetectorSamples<T>,
    config: &DetectorTrainConfig,
) -> Result<(DetectorModel<T>, TrainLog)> {
    config.validate()?;
    let mut model = DetectorModel::init(channels, states, &config.hidden, config.train.init_scale, config.train.seed)?;
    if config.train.epochs == 0 {
        return Ok((model, TrainLog::default()));
    }
    let positives: Vec<usize> = (0..samples.len()).filter(|&i| samples.targets[i].is_some()).collect();
    let background: Vec<usize> = (0..samples.len()).filter(|&i| samples.targets[i].is_none()).collect();
    if positives.is_empty() {
        return Err(Error::Training("detector sample assignment produced no positives".into()));
    }
    let dim = model.input_dim();
    let k = states + 5;
    let b = config.train.batch_size;
    let lr = T::lit(config.train.learning_rate);
    let reg_w = T::lit(config.regression_weight);
    let mut rng = seeded_stream(config.train.seed, 0x4445_0001);
    let (mut pos, mut bg) = (positives.clone(), background.clone());
    let mut pos_cursor = pos.len();
    let mut log = TrainLog::default();
    let mut batch_x = Vec::with_capacity(b * dim);
    for _ in 0..config.train.epochs {
        bg.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut bg_cursor = 0;
        loop {
            let bg_take = if bg.is_empty() { 0 } else { (b - b / 4).min(bg.len() - bg_cursor) };
            if !bg.is_empty() && bg_take == 0 {
                break;
            }
            let pos_take = if bg.is_empty() { b / 4 } else { (b / 4).min(bg_take / 3).max(usize::from(bg_take >= 3)) };
            let mut members: Vec<usize> = bg[bg_cursor..bg_cursor + bg_take].to_vec();
            bg_cursor += bg_take;
            for _ in 0..pos_take {
                if pos_cursor == pos.len() {
                    pos.shuffle(&mut rng);
                    pos_cursor = 0;
                }
                members.push(pos[pos_cursor]);
                pos_cursor += 1;
            }
            batch_x.clear();
            for &i in &members {
                batch_x.extend_from_slice(&samples.features[i * dim..(i + 1) * dim]);
            }
            let n = members.len();
            let cache = model.net.forward_batch(&batch_x, n)?;
            let inv = T::lit(1.0 / n as f64);
            let mut grad = vec![T::zero(); n * k];
            for (j, &i) in members.iter().enumerate() {
                let out = &cache.output()[j * k..(j + 1) * k];
                let (ce, g) = softmax_cross_entropy(&out[..states + 1], samples.labels[i]);
                epoch_loss += ce.as_f64();
                let row = &mut grad[j * k..(j + 1) * k];
                for (d, gv) in row.iter_mut().zip(g) {
                    *d = gv * inv;
                }
                if let Some(t) = &samples.targets[i] {
                    for q in 0..4 {
                        let (l, gq) = smooth_l1(out[states + 1 + q] - t[q]);
                        epoch_loss += (reg_w * l).as_f64();
                        row[states + 1 + q] = reg_w * gq * inv;
                    }
                }
            }
            let grads = model.net.backward(&cache, &grad)?;
            model.net.sgd_step(&grads, lr)?;
            seen += n;
            if bg.is_empty() && seen >= pos.len() {
                break;
            }
        }
        log.epoch_losses.push(epoch_loss / seen.max(1) as f64);
    }
    if !model.net.is_finite() {
        return Err(Error::Training("detector weights diverged".into()));
    }
    Ok((model, log))
}

pub fn train_detector<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    states: usize,
    config: &DetectorTrainConfig,
) -> Result<(DetectorModel<T>, TrainLog)> {
    train_detector_gated(dataset, backbone, attention, proposer, states, config, None)
}

/// [`train_detector`] reusing gated windows, see [`collect_detector_samples_gated`].
pub fn train_detector_gated<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    states: usize,
    config: &DetectorTrainConfig,
    gated: Option<&[Vec<WindowRef>]>,
) -> Result<(DetectorModel<T>, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("detector training needs a non-empty dataset".into()));
    }
    let channels = backbone.channels();
    if config.train.epochs == 0 {
        let model = DetectorModel::init(channels, states, &config.hidden, config.train.init_scale, config.train.seed)?;
        return Ok((model, TrainLog::default()));
    }
    let samples = collect_detector_samples_gated(dataset, backbone, attention, proposer, states, config, gated)?;
    fit_detector(channels, states, &samples, config)
}
