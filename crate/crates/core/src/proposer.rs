//! From gated windows to ranked proposals: window extraction, the joint
//! objectness/segmentation head, mask-to-box conversion, NMS and top-n.

use rand::seq::SliceRandom;
use image::RgbImage;

use crate::attention::{compute_attention, gate_windows_scored, AttentionModel};
use crate::data::SceneSource;
use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, Annotation, BBox};
use crate::nn::{bce, seeded_stream, Activation, DenseNet, TrainConfig, TrainLog};
use crate::parallel::ordered_map;
use crate::pyramid::{
    build_pyramid, level_for_object, window_to_box, FeatureProvider, FeaturePyramid, WindowRef, WINDOW_SIZE,
};
use crate::scalar::Real;

/// Cells per window (and mask values per proposal).
pub const WINDOW_CELLS: usize = WINDOW_SIZE * WINDOW_SIZE;

const SCORING_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<T> {
    pub bbox: BBox<T>,
    pub score: T,
    /// `10 × 10`, row-major.
    pub mask: Vec<T>,
    pub source: WindowRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposerConfig {
    /// Attention threshold τ.
    pub tau: f64,
    /// Gated windows per image, across all levels.
    pub budget: usize,
    /// Proposals returned per image (n).
    pub top_n: usize,
    pub nms: f64,
    /// Mask binarisation threshold θ.
    pub theta: f64,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self { tau: 0.5, budget: 1000, top_n: 5000, nms: 0.7, theta: 0.5 }
    }
}

impl ProposerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.nms) {
            return Err(Error::Config(format!("proposal NMS threshold must lie in [0, 1], got {}", self.nms)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("mask threshold must lie in (0, 1), got {}", self.theta)));
        }
        Ok(())
    }
}

/// Shared trunk over the flattened `10 × 10 × C` window with a one-unit
/// objectness head and a 100-unit segmentation head, all logistic outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposerModel<T> {
    channels: usize,
    pub trunk: DenseNet<T>,
    pub score_head: DenseNet<T>,
    pub mask_head: DenseNet<T>,
}

impl<T: Real> ProposerModel<T> {
    pub fn new(channels: usize, trunk: DenseNet<T>, score_head: DenseNet<T>, mask_head: DenseNet<T>) -> Result<Self> {
        let logistic = |n: &DenseNet<T>| n.layers().last().map(|l| l.activation) == Some(Activation::Logistic);
        if trunk.input_dim() != WINDOW_CELLS * channels {
            return Err(Error::Config(format!("proposer trunk must take {} inputs", WINDOW_CELLS * channels)));
        }
        if score_head.input_dim() != trunk.output_dim() || mask_head.input_dim() != trunk.output_dim() {
            return Err(Error::Config("proposer heads must consume the trunk output".into()));
        }
        if score_head.output_dim() != 1 || mask_head.output_dim() != WINDOW_CELLS || !logistic(&score_head) || !logistic(&mask_head) {
            return Err(Error::Config("proposer heads must be 1 and 100 logistic outputs".into()));
        }
        Ok(Self { channels, trunk, score_head, mask_head })
    }

    pub fn init(channels: usize, hidden: &[usize], scale: f64, seed: u64) -> Result<Self> {
        let mut rng = seeded_stream(seed, 0x5052);
        let mut dims = vec![WINDOW_CELLS * channels];
        dims.extend_from_slice(hidden);
        let trunk = DenseNet::init(&dims, &vec![Activation::Relu; hidden.len()], scale, &mut rng)?;
        let width = trunk.output_dim();
        let score_head = DenseNet::init(&[width, 1], &[Activation::Logistic], scale, &mut rng)?;
        let mask_head = DenseNet::init(&[width, WINDOW_CELLS], &[Activation::Logistic], scale, &mut rng)?;
        Self::new(channels, trunk, score_head, mask_head)
    }

    pub fn zeros(channels: usize, hidden: &[usize]) -> Result<Self> {
        let mut dims = vec![WINDOW_CELLS * channels];
        dims.extend_from_slice(hidden);
        let trunk = DenseNet::zeros(&dims, &vec![Activation::Relu; hidden.len()])?;
        let width = trunk.output_dim();
        let score_head = DenseNet::zeros(&[width, 1], &[Activation::Logistic])?;
        let mask_head = DenseNet::zeros(&[width, WINDOW_CELLS], &[Activation::Logistic])?;
        Self::new(channels, trunk, score_head, mask_head)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn input_dim(&self) -> usize {
        WINDOW_CELLS * self.channels
    }

    pub fn is_finite(&self) -> bool {
        self.trunk.is_finite() && self.score_head.is_finite() && self.mask_head.is_finite()
    }
}

/// `10 × 10 × C` block of window `w`, cell-major; cells outside the level
/// grid are zero.
pub fn extract_window<T: Real>(pyramid: &FeaturePyramid<T>, w: &WindowRef) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); WINDOW_CELLS * pyramid.channels];
    extract_window_into(pyramid, w, &mut out)?;
    Ok(out)
}

fn extract_window_into<T: Real>(pyramid: &FeaturePyramid<T>, w: &WindowRef, out: &mut [T]) -> Result<()> {
    let level = pyramid
        .level(w.factor)
        .ok_or_else(|| Error::Config(format!("no pyramid level L{}", w.factor)))?;
    if !w.intersects_grid(level.rows, level.cols) {
        return Err(Error::Config(format!("window {w:?} lies outside the L{} grid", w.factor)));
    }
    let c = level.channels;
    let inside = (level.cols - w.col).min(WINDOW_SIZE);
    for i in 0..WINDOW_SIZE {
        let dst = &mut out[i * WINDOW_SIZE * c..(i + 1) * WINDOW_SIZE * c];
        let r = w.row + i;
        if r < level.rows {
            let start = (r * level.cols + w.col) * c;
            dst[..inside * c].copy_from_slice(&level.data[start..start + inside * c]);
            dst[inside * c..].iter_mut().for_each(|v| *v = T::zero());
        } else {
            dst.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(())
}

/// Objectness and mask for a batch of flattened windows.
pub fn score_batch<T: Real>(model: &ProposerModel<T>, blocks: &[T], batch: usize) -> Result<Vec<(T, Vec<T>)>> {
    if blocks.len() != batch * model.input_dim() {
        return Err(Error::Config(format!(
            "window block holds {} values, model expects {} per window",
            blocks.len(),
            model.input_dim()
        )));
    }
    if batch == 0 {
        return Ok(Vec::new());
    }
    let hidden = model.trunk.predict_batch(blocks, batch)?;
    let scores = model.score_head.predict_batch(&hidden, batch)?;
    let masks = model.mask_head.predict_batch(&hidden, batch)?;
    Ok(scores.into_iter().zip(masks.chunks_exact(WINDOW_CELLS)).map(|(s, m)| (s, m.to_vec())).collect())
}

pub fn score_and_segment<T: Real>(model: &ProposerModel<T>, block: &[T]) -> Result<(T, Vec<T>)> {
    Ok(score_batch(model, block, 1)?.pop().expect("one window"))
}

/// Tight box around mask cells `≥ θ`, in image pixels; the whole window if
/// no cell passes.
pub fn mask_to_box<T: Real>(mask: &[T], w: &WindowRef, theta: T) -> BBox<T> {
    let mut span: Option<(usize, usize, usize, usize)> = None;
    for (k, &v) in mask.iter().enumerate().take(WINDOW_CELLS) {
        if v >= theta {
            let (r, c) = (k / WINDOW_SIZE, k % WINDOW_SIZE);
            span = Some(match span {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
    }
    match span {
        None => window_to_box(w),
        Some((r0, c0, r1, c1)) => {
            let n = w.factor as f64;
            BBox {
                x_min: T::lit(n * (w.col + c0) as f64),
                y_min: T::lit(n * (w.row + r0) as f64),
                x_max: T::lit(n * (w.col + c1 + 1) as f64),
                y_max: T::lit(n * (w.row + r1 + 1) as f64),
            }
        }
    }
}

/// Greedy non-maximum suppression: indices of the kept boxes, by descending
/// score (ties keep input order). A box is dropped when its IoU with an
/// already kept box is `≥ t`.
pub fn nms_indices<T: Real>(boxes: &[BBox<T>], scores: &[T], t: T) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores").then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) < t) {
            kept.push(i);
        }
    }
    kept
}

pub fn nms<T: Real>(proposals: Vec<Proposal<T>>, t: T) -> Vec<Proposal<T>> {
    let boxes: Vec<_> = proposals.iter().map(|p| p.bbox).collect();
    let scores: Vec<_> = proposals.iter().map(|p| p.score).collect();
    let keep = nms_indices(&boxes, &scores, t);
    let mut slots: Vec<Option<Proposal<T>>> = proposals.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().expect("index kept once")).collect()
}

/// Scores every window and converts masks to clipped boxes, in window order.
pub fn score_windows<T: Real>(
    pyramid: &FeaturePyramid<T>,
    model: &ProposerModel<T>,
    windows: &[WindowRef],
    theta: T,
) -> Result<Vec<Proposal<T>>> {
    if pyramid.channels != model.channels {
        return Err(Error::Config(format!(
            "proposer expects {} channels, pyramid has {}",
            model.channels, pyramid.channels
        )));
    }
    let dim = model.input_dim();
    let mut out = Vec::with_capacity(windows.len());
    let mut buf = vec![T::zero(); SCORING_CHUNK * dim];
    for chunk in windows.chunks(SCORING_CHUNK) {
        for (k, w) in chunk.iter().enumerate() {
            extract_window_into(pyramid, w, &mut buf[k * dim..(k + 1) * dim])?;
        }
        let scored = score_batch(model, &buf[..chunk.len() * dim], chunk.len())?;
        for (w, (score, mask)) in chunk.iter().zip(scored) {
            let raw = mask_to_box(&mask, w, theta);
            if let Some(bbox) = clip_box(&raw, pyramid.width, pyramid.height) {
                out.push(Proposal { bbox, score, mask, source: *w });
            }
        }
    }
    Ok(out)
}

/// Ranked proposals for an already built pyramid.
pub fn propose_pyramid<T: Real>(
    pyramid: &FeaturePyramid<T>,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    config: &ProposerConfig,
) -> Result<Vec<Proposal<T>>> {
    config.validate()?;
    if config.top_n == 0 {
        return Ok(Vec::new());
    }
    let windows = gated_windows(pyramid, attention, config)?;
    propose_windows(pyramid, proposer, &windows, config)
}

/// Attention-gated windows of a pyramid, best attention first.
pub fn gated_windows<T: Real>(
    pyramid: &FeaturePyramid<T>,
    attention: &AttentionModel<T>,
    config: &ProposerConfig,
) -> Result<Vec<WindowRef>> {
    let maps = compute_attention(pyramid, attention)?;
    Ok(gate_windows_scored(&maps, T::lit(config.tau), config.budget).into_iter().map(|(w, _)| w).collect())
}

/// Ranked proposals from windows already returned by [`gated_windows`].
pub fn propose_windows<T: Real>(
    pyramid: &FeaturePyramid<T>,
    proposer: &ProposerModel<T>,
    windows: &[WindowRef],
    config: &ProposerConfig,
) -> Result<Vec<Proposal<T>>> {
    config.validate()?;
    if config.top_n == 0 {
        return Ok(Vec::new());
    }
    let scored = score_windows(pyramid, proposer, windows, T::lit(config.theta))?;
    let mut kept = nms(scored, T::lit(config.nms));
    kept.truncate(config.top_n);
    Ok(kept)
}

pub fn propose<T: Real, P: FeatureProvider<T> + ?Sized>(
    image: &RgbImage,
    backbone: &P,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    config: &ProposerConfig,
) -> Result<Vec<Proposal<T>>> {
    let pyramid = build_pyramid(image, backbone)?;
    propose_pyramid(&pyramid, attention, proposer, config)
}

/// Fraction of every window cell covered by `b`, row-major.
pub fn mask_target<T: Real>(w: &WindowRef, b: &BBox<T>) -> Vec<T> {
    let n = w.factor as f64;
    let cell_area = T::lit(n * n);
    (0..WINDOW_CELLS)
        .map(|k| {
            let (r, c) = ((w.row + k / WINDOW_SIZE) as f64, (w.col + k % WINDOW_SIZE) as f64);
            let cell = BBox::<T>::from_f64(c * n, r * n, (c + 1.0) * n, (r + 1.0) * n);
            cell.intersection_area(b) / cell_area
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposerTrainConfig {
    pub train: TrainConfig,
    pub hidden: Vec<usize>,
    /// Gating used to collect candidate windows.
    pub proposer: ProposerConfig,
    pub max_positives: usize,
    /// Negatives kept per positive (at least `min_negatives` per image).
    pub negative_ratio: f64,
    pub min_negatives: usize,
    /// Relative weight of the per-cell mask loss.
    pub mask_weight: f64,
}

impl Default for ProposerTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig { learning_rate: 0.05, epochs: 12, batch_size: 32, seed: 42, ..TrainConfig::default() },
            hidden: vec![256, 256],
            proposer: ProposerConfig::default(),
            max_positives: 32,
            negative_ratio: 2.0,
            min_negatives: 16,
            mask_weight: 1.0,
        }
    }
}

impl ProposerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.proposer.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("proposer trunk needs at least one non-empty hidden layer".into()));
        }
        if !(self.negative_ratio >= 0.0 && self.mask_weight >= 0.0) {
            return Err(Error::Config("proposer sampling ratio and mask weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Outcome of the window assignment rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowLabel {
    /// Index of the matched annotation.
    Positive(usize),
    Negative,
    Ignored,
}

/// Positive when the window box reaches IoU 0.5 with an annotation assigned
/// to the window's level (the best such annotation), negative when its IoU
/// with every annotation stays below 0.3.
pub fn assign_window<T: Real>(w: &WindowRef, annotations: &[Annotation<T>]) -> WindowLabel {
    let wb = window_to_box::<T>(w);
    let mut best: Option<(T, usize)> = None;
    let mut max_any = T::zero();
    for (k, a) in annotations.iter().enumerate() {
        let v = iou(&wb, &a.bbox);
        max_any = max_any.max(v);
        if level_for_object(&a.bbox) == w.factor && v >= T::lit(0.5) && best.map_or(true, |(b, _)| v > b) {
            best = Some((v, k));
        }
    }
    match best {
        Some((_, k)) => WindowLabel::Positive(k),
        None if max_any < T::lit(0.3) => WindowLabel::Negative,
        None => WindowLabel::Ignored,
    }
}

/// Every window on an annotation's own level whose box reaches IoU 0.5 with it.
pub fn positive_windows<T: Real>(a: &Annotation<T>, rows: usize, cols: usize) -> Vec<WindowRef> {
    let factor = level_for_object(&a.bbox);
    let n = factor as f64;
    let side = WINDOW_SIZE as f64;
    let b = &a.bbox;
    // a window reaching IoU 0.5 must overlap the box, which bounds its anchor
    let r0 = ((b.y_min.as_f64() / n) - side).floor().max(0.0) as usize;
    let r1 = ((b.y_max.as_f64() / n).ceil().max(0.0) as usize).min(rows);
    let c0 = ((b.x_min.as_f64() / n) - side).floor().max(0.0) as usize;
    let c1 = ((b.x_max.as_f64() / n).ceil().max(0.0) as usize).min(cols);
    let mut out = Vec::new();
    for row in r0.min(r1)..r1 {
        for col in c0.min(c1)..c1 {
            let w = WindowRef { factor, row, col };
            if iou(&window_to_box::<T>(&w), b) >= T::lit(0.5) {
                out.push(w);
            }
        }
    }
    out
}

struct WindowSamples<T> {
    features: Vec<T>,
    /// Mask target for positives, `None` for negatives.
    masks: Vec<Option<Vec<T>>>,
}

fn sample_windows<T: Real>(
    pyramid: &FeaturePyramid<T>,
    gated: &[WindowRef],
    annotations: &[Annotation<T>],
    config: &ProposerTrainConfig,
    image_index: usize,
) -> Result<WindowSamples<T>> {
    let mut windows = gated.to_vec();
    for a in annotations {
        let level = pyramid.level(level_for_object(&a.bbox)).expect("assigned level exists");
        windows.extend(positive_windows(a, level.rows, level.cols));
    }
    windows.sort_unstable();
    windows.dedup();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for w in windows {
        match assign_window(&w, annotations) {
            WindowLabel::Positive(k) => positives.push((w, k)),
            WindowLabel::Negative => negatives.push(w),
            WindowLabel::Ignored => {}
        }
    }
    let mut rng = seeded_stream(config.train.seed, 0x5000_0000 + image_index as u64);
    positives.shuffle(&mut rng);
    positives.truncate(config.max_positives);
    negatives.shuffle(&mut rng);
    let want = ((positives.len() as f64 * config.negative_ratio).ceil() as usize).max(config.min_negatives);
    negatives.truncate(want);
    let dim = WINDOW_CELLS * pyramid.channels;
    let mut out = WindowSamples { features: Vec::with_capacity((positives.len() + negatives.len()) * dim), masks: Vec::new() };
    let mut buf = vec![T::zero(); dim];
    for (w, k) in &positives {
        extract_window_into(pyramid, w, &mut buf)?;
        out.features.extend_from_slice(&buf);
        out.masks.push(Some(mask_target(w, &annotations[*k].bbox)));
    }
    for w in &negatives {
        extract_window_into(pyramid, w, &mut buf)?;
        out.features.extend_from_slice(&buf);
        out.masks.push(None);
    }
    Ok(out)
}

/// Trains the proposer on windows gated by a trained attention model plus
/// the enumerated positive windows of every annotation.
pub fn train_proposer<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    config: &ProposerTrainConfig,
) -> Result<(ProposerModel<T>, TrainLog)> {
    train_proposer_gated(dataset, backbone, attention, config).map(|(m, log, _)| (m, log))
}

/// [`train_proposer`], also returning the gated windows of every training
/// image (`None` when no epochs were run).
pub fn train_proposer_gated<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    config: &ProposerTrainConfig,
) -> Result<(ProposerModel<T>, TrainLog, Option<Vec<Vec<WindowRef>>>)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Training("proposer training needs a non-empty dataset".into()));
    }
    let channels = backbone.channels();
    let mut model = ProposerModel::init(channels, &config.hidden, config.train.init_scale, config.train.seed)?;
    if config.train.epochs == 0 {
        return Ok((model, TrainLog::default(), None));
    }
    let per_image = ordered_map(dataset.len(), |i| -> Result<(WindowSamples<T>, Vec<WindowRef>)> {
        let img = dataset.image(i)?;
        let pyramid = build_pyramid(&img, backbone)?;
        let gated = gated_windows(&pyramid, attention, &config.proposer)?;
        let s = sample_windows(&pyramid, &gated, &dataset.records()[i].annotations, config, i)?;
        Ok((s, gated))
    });
    let mut samples = WindowSamples { features: Vec::new(), masks: Vec::new() };
    let mut gated = Vec::with_capacity(dataset.len());
    for s in per_image {
        let (s, g) = s?;
        samples.features.extend(s.features);
        samples.masks.extend(s.masks);
        gated.push(g);
    }
    if !samples.masks.iter().any(Option::is_some) {
        return Err(Error::Training("assignment produced no positives".into()));
    }
    let log = fit_proposer(&mut model, &samples, &config.train, config.mask_weight)?;
    if !model.is_finite() {
        return Err(Error::Training("proposer weights diverged".into()));
    }
    Ok((model, log, Some(gated)))
}

fn fit_proposer<T: Real>(
    model: &mut ProposerModel<T>,
    samples: &WindowSamples<T>,
    train: &TrainConfig,
    mask_weight: f64,
) -> Result<TrainLog> {
    let dim = model.input_dim();
    let n = samples.masks.len();
    let mut rng = seeded_stream(train.seed, 0x5052_0001);
    let mut order: Vec<usize> = (0..n).collect();
    let lr = T::lit(train.learning_rate);
    let mut log = TrainLog::default();
    let mut batch = Vec::with_capacity(train.batch_size * dim);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(train.batch_size) {
            let b = chunk.len();
            batch.clear();
            for &i in chunk {
                batch.extend_from_slice(&samples.features[i * dim..(i + 1) * dim]);
            }
            let trunk_cache = model.trunk.forward_batch(&batch, b)?;
            let score_cache = model.score_head.forward_batch(trunk_cache.output(), b)?;
            let mask_cache = model.mask_head.forward_batch(trunk_cache.output(), b)?;
            let inv = T::lit(1.0 / b as f64);
            let cell_w = T::lit(mask_weight / WINDOW_CELLS as f64) * inv;
            let mut d_score = Vec::with_capacity(b);
            let mut d_mask = vec![T::zero(); b * WINDOW_CELLS];
            for (j, &i) in chunk.iter().enumerate() {
                let p = score_cache.output()[j];
                let target = &samples.masks[i];
                let y = if target.is_some() { T::one() } else { T::zero() };
                epoch_loss += bce(p, y).as_f64();
                d_score.push((p - y) * inv);
                if let Some(t) = target {
                    let m = &mask_cache.output()[j * WINDOW_CELLS..(j + 1) * WINDOW_CELLS];
                    let row = &mut d_mask[j * WINDOW_CELLS..(j + 1) * WINDOW_CELLS];
                    for ((d, &mv), &tv) in row.iter_mut().zip(m).zip(t) {
                        epoch_loss += mask_weight / WINDOW_CELLS as f64 * bce(mv, tv).as_f64();
                        *d = (mv - tv) * cell_w;
                    }
                }
            }
            let g_score = model.score_head.backward_preactivation(&score_cache, &d_score)?;
            let g_mask = model.mask_head.backward_preactivation(&mask_cache, &d_mask)?;
            let d_hidden: Vec<T> = g_score.input.iter().zip(&g_mask.input).map(|(&a, &c)| a + c).collect();
            let g_trunk = model.trunk.backward(&trunk_cache, &d_hidden)?;
            model.score_head.sgd_step(&g_score, lr)?;
            model.mask_head.sgd_step(&g_mask, lr)?;
            model.trunk.sgd_step(&g_trunk, lr)?;
        }
        log.epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::{PyramidLevel, LEVEL_FACTORS};
    use proptest::prelude::*;

    fn pyramid_with(w: u32, h: u32, channels: usize) -> FeaturePyramid<f64> {
        let levels = LEVEL_FACTORS
            .iter()
            .map(|&f| {
                let (rows, cols) = crate::pyramid::level_dims(w, h, f);
                let mut l = PyramidLevel::zeros(f, rows, cols, channels);
                for (i, v) in l.data.iter_mut().enumerate() {
                    *v = (i as f64 * 0.37 + f as f64).sin();
                }
                l
            })
            .collect();
        FeaturePyramid::from_levels(w, h, levels).unwrap()
    }

    #[test]
    fn window_extraction_copies_and_pads() {
        let p = pyramid_with(640, 640, 3);
        let l4 = p.level(4).unwrap();
        let w = WindowRef { factor: 4, row: 20, col: 30 };
        let block = extract_window(&p, &w).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(&block[(i * 10 + j) * 3..(i * 10 + j + 1) * 3], l4.cell(20 + i, 30 + j));
            }
        }
        let l64 = p.level(64).unwrap();
        let corner = extract_window(&p, &WindowRef { factor: 64, row: 0, col: 0 }).unwrap();
        assert_eq!(corner, l64.data);
        // L8 has 80 columns; anchor 73 leaves 3 columns beyond the edge
        let right = extract_window(&p, &WindowRef { factor: 8, row: 5, col: 73 }).unwrap();
        let l8 = p.level(8).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let cell = &right[(i * 10 + j) * 3..(i * 10 + j + 1) * 3];
                if j >= 7 {
                    assert!(cell.iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(cell, l8.cell(5 + i, 73 + j));
                }
            }
        }
    }

    #[test]
    fn zero_model_scores_one_half() {
        let m = ProposerModel::<f64>::zeros(16, &[8]).unwrap();
        let (s, mask) = score_and_segment(&m, &vec![0.3; 1600]).unwrap();
        assert_eq!(s, 0.5);
        assert!(mask.iter().all(|&v| v == 0.5) && mask.len() == 100);
        assert!(matches!(score_and_segment(&m, &[0.0; 10]), Err(Error::Config(_))));
        let r = ProposerModel::<f64>::init(16, &[8, 8], 6.0, 1).unwrap();
        let x: Vec<f64> = (0..1600).map(|i| ((i * 7919) % 101) as f64 / 10.0 - 5.0).collect();
        let (s, mask) = score_and_segment(&r, &x).unwrap();
        assert!((0.0..=1.0).contains(&s) && mask.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_to_box_examples() {
        let w = WindowRef { factor: 2, row: 0, col: 0 };
        assert_eq!(mask_to_box(&[1.0; 100], &w, 0.5), window_to_box(&w));
        assert_eq!(mask_to_box(&[0.0; 100], &w, 0.5), window_to_box(&w));
        let mut m = [0.0; 100];
        m[44] = 0.9;
        assert_eq!(mask_to_box(&m, &w, 0.5), BBox::from_f64(8.0, 8.0, 10.0, 10.0));
    }

    #[test]
    fn nms_examples() {
        let b = |x0: f64, x1: f64| BBox::from_f64(x0, 0.0, x1, 10.0);
        assert_eq!(nms_indices(&[b(0.0, 10.0), b(0.0, 10.0)], &[0.9, 0.8], 0.5), vec![0]);
        assert_eq!(nms_indices(&[b(0.0, 10.0), b(20.0, 30.0)], &[0.8, 0.9], 0.5), vec![1, 0]);
        assert_eq!(nms_indices(&[b(0.0, 10.0), b(5.0, 15.0)], &[0.9, 0.8], 0.3), vec![0]);
    }

    fn nms_oracle(boxes: &[BBox<f64>], scores: &[f64], t: f64) -> Vec<usize> {
        // repeatedly take the best remaining box and delete everything it covers
        let mut alive: Vec<usize> = (0..boxes.len()).collect();
        let mut out = Vec::new();
        while !alive.is_empty() {
            let mut best = alive[0];
            for &i in &alive {
                if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                    best = i;
                }
            }
            out.push(best);
            alive.retain(|&i| i != best && iou(&boxes[i], &boxes[best]) < t);
        }
        out
    }

    proptest! {
        #[test]
        fn nms_matches_oracle(
            raw in proptest::collection::vec((0u8..40, 0u8..40, 1u8..20, 1u8..20, 0u8..10), 0..50),
            t in 0.0f64..1.0,
        ) {
            let boxes: Vec<_> = raw.iter().map(|&(x, y, w, h, _)| {
                BBox::from_f64(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
            }).collect();
            let scores: Vec<f64> = raw.iter().map(|r| r.4 as f64 / 10.0).collect();
            prop_assert_eq!(nms_indices(&boxes, &scores, t), nms_oracle(&boxes, &scores, t));
        }

        #[test]
        fn mask_box_stays_inside_window(
            mask in proptest::collection::vec(0.0f64..1.0, 100),
            li in 0usize..6, row in 0usize..30, col in 0usize..30, theta in 0.05f64..0.95,
        ) {
            let w = WindowRef { factor: LEVEL_FACTORS[li], row, col };
            let (iw, ih) = (1000, 700);
            let inner = mask_to_box(&mask, &w, theta);
            let outer = window_to_box::<f64>(&w);
            prop_assert!(outer.contains(&inner));
            if let (Some(a), Some(b)) = (clip_box(&inner, iw, ih), clip_box(&outer, iw, ih)) {
                prop_assert!(b.contains(&a));
            }
        }
    }

    #[test]
    fn window_assignment_thresholds() {
        // 20×20 object sits on L2; the window at its corner covers it exactly
        let anns = [Annotation { bbox: BBox::<f64>::from_f64(40.0, 40.0, 60.0, 60.0), state: 0 }];
        assert_eq!(assign_window(&WindowRef { factor: 2, row: 20, col: 20 }, &anns), WindowLabel::Positive(0));
        // shifted by 4 cells: IoU 12·20 / (800 − 240) = 0.43
        assert_eq!(assign_window(&WindowRef { factor: 2, row: 20, col: 24 }, &anns), WindowLabel::Ignored);
        assert_eq!(assign_window(&WindowRef { factor: 2, row: 100, col: 100 }, &anns), WindowLabel::Negative);
        // an L4 window containing the object has IoU 0.25 and the wrong level
        assert_eq!(assign_window(&WindowRef { factor: 4, row: 10, col: 10 }, &anns), WindowLabel::Negative);
        let enumerated = positive_windows(&anns[0], 500, 500);
        assert!(enumerated.contains(&WindowRef { factor: 2, row: 20, col: 20 }));
        for w in &enumerated {
            assert_eq!(assign_window(w, &anns), WindowLabel::Positive(0));
        }
    }

    #[test]
    fn mask_target_is_fractional_coverage() {
        let w = WindowRef { factor: 4, row: 0, col: 0 };
        let t = mask_target(&w, &BBox::<f64>::from_f64(2.0, 0.0, 8.0, 4.0));
        assert_eq!(&t[..3], &[0.5, 1.0, 0.0]);
        assert!(t[10..].iter().all(|&v| v == 0.0));
    }
}
