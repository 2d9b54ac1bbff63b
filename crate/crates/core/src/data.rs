//! Canonical dataset records, JSON-lines persistence and the synthetic
//! traffic-scene generator.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::nn::seeded_stream;
use crate::geometry::{iou, size_bin, Annotation, BBox, SizeBin, StateVocabulary};
use crate::pyramid::{rgb_to_hsv, MIN_IMAGE_SIDE};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord<T> {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub annotations: Vec<Annotation<T>>,
    /// Raster file, relative to the dataset file's directory.
    pub image_path: Option<String>,
}

impl<T: Real> ImageRecord<T> {
    fn validate(&self, vocab: &StateVocabulary) -> std::result::Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!("image {} has zero size", self.id));
        }
        let (w, h) = (T::lit(self.width as f64), T::lit(self.height as f64));
        for (k, a) in self.annotations.iter().enumerate() {
            if !a.bbox.is_valid() {
                return Err(format!("annotation {k} of {} has an invalid box", self.id));
            }
            if a.bbox.x_min < T::zero() || a.bbox.y_min < T::zero() || a.bbox.x_max > w || a.bbox.y_max > h
            {
                return Err(format!(
                    "annotation {k} of {} lies outside the {}x{} image: {}",
                    self.id, self.width, self.height, a.bbox
                ));
            }
            if a.state >= vocab.len() {
                return Err(format!("annotation {k} of {} has state index {}", self.id, a.state));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    state: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image: Option<String>,
    annotations: Vec<RawAnnotation>,
}

pub fn record_to_json<T: Real>(record: &ImageRecord<T>, vocab: &StateVocabulary) -> Result<String> {
    let raw = RawRecord {
        id: record.id.clone(),
        width: record.width,
        height: record.height,
        image: record.image_path.clone(),
        annotations: record
            .annotations
            .iter()
            .map(|a| {
                let state = vocab
                    .name(a.state)
                    .ok_or_else(|| Error::Config(format!("state index {} not in vocabulary", a.state)))?;
                Ok(RawAnnotation { bbox: a.bbox.to_array(), state: state.to_string() })
            })
            .collect::<Result<_>>()?,
    };
    serde_json::to_string(&raw).map_err(|e| Error::Config(e.to_string()))
}

/// Writes one record per line. An empty dataset produces an empty file.
pub fn save_dataset<T: Real>(records: &[ImageRecord<T>], vocab: &StateVocabulary, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&record_to_json(r, vocab)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn parse_dataset<T: Real>(text: &str, vocab: &StateVocabulary) -> Result<Vec<ImageRecord<T>>> {
    let mut records = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let mut annotations = Vec::with_capacity(raw.annotations.len());
        for a in &raw.annotations {
            let state = vocab.index_of(&a.state).ok_or_else(|| Error::Validation {
                line: line_no,
                message: format!("unknown state {:?}", a.state),
            })?;
            let [x0, y0, x1, y1] = a.bbox;
            let bbox = BBox::new(T::lit(x0), T::lit(y0), T::lit(x1), T::lit(y1))
                .map_err(|e| Error::Validation { line: line_no, message: e.to_string() })?;
            annotations.push(Annotation { bbox, state });
        }
        let record = ImageRecord {
            id: raw.id,
            width: raw.width,
            height: raw.height,
            annotations,
            image_path: raw.image,
        };
        record.validate(vocab).map_err(|message| Error::Validation { line: line_no, message })?;
        if !ids.insert(record.id.clone()) {
            return Err(Error::Validation {
                line: line_no,
                message: format!("duplicate image id {:?}", record.id),
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Loads a dataset; either every record satisfies its invariants or the
/// whole load fails.
pub fn load_dataset<T: Real>(path: &Path, vocab: &StateVocabulary) -> Result<Vec<ImageRecord<T>>> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, vocab)
}

/// Read-only access to a dataset's records and rasters.
pub trait SceneSource<T>: Sync {
    fn records(&self) -> &[ImageRecord<T>];
    fn image(&self, index: usize) -> Result<RgbImage>;

    fn len(&self) -> usize {
        self.records().len()
    }

    fn is_empty(&self) -> bool {
        self.records().is_empty()
    }
}

/// Dataset whose rasters live on disk next to the JSON-lines file.
pub struct DiskDataset<T> {
    pub base_dir: PathBuf,
    pub records: Vec<ImageRecord<T>>,
}

impl<T: Real> DiskDataset<T> {
    pub fn open(path: &Path, vocab: &StateVocabulary) -> Result<Self> {
        let records = load_dataset(path, vocab)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, records })
    }
}

impl<T: Real> SceneSource<T> for DiskDataset<T> {
    fn records(&self) -> &[ImageRecord<T>] {
        &self.records
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        let rec = &self.records[index];
        let rel = rec.image_path.as_ref().ok_or_else(|| Error::Validation {
            line: index + 1,
            message: format!("record {} has no image path", rec.id),
        })?;
        let img = image::open(self.base_dir.join(rel))?.to_rgb8();
        if img.dimensions() != (rec.width, rec.height) {
            return Err(Error::Validation {
                line: index + 1,
                message: format!(
                    "raster of {} is {}x{}, record says {}x{}",
                    rec.id,
                    img.width(),
                    img.height(),
                    rec.width,
                    rec.height
                ),
            });
        }
        Ok(img)
    }
}

/// Synthetic scenes `first_index ..` regenerated on demand; nothing touches
/// the disk.
pub struct SynthDataset<T> {
    pub config: SynthConfig,
    pub vocab: StateVocabulary,
    pub first_index: u64,
    records: Vec<ImageRecord<T>>,
}

impl<T: Real> SynthDataset<T> {
    pub fn new(config: SynthConfig, vocab: StateVocabulary, first_index: u64, count: usize) -> Result<Self> {
        let records = (0..count as u64)
            .map(|i| generate_record(&config, &vocab, first_index + i))
            .collect::<Result<_>>()?;
        Ok(Self { config, vocab, first_index, records })
    }
}

impl<T: Real> SceneSource<T> for SynthDataset<T> {
    fn records(&self) -> &[ImageRecord<T>] {
        &self.records
    }

    fn image(&self, index: usize) -> Result<RgbImage> {
        let (img, _) = generate_scene::<T>(&self.config, &self.vocab, self.first_index + index as u64)?;
        Ok(img)
    }
}

/// Appearance of a lamp, derived from the state name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LampStyle {
    Red,
    Amber,
    Green,
    Off,
}

impl LampStyle {
    pub fn for_state(name: &str) -> Option<LampStyle> {
        match name.to_ascii_lowercase().as_str() {
            "stop" | "red" => Some(LampStyle::Red),
            "warning" | "amber" | "yellow" => Some(LampStyle::Amber),
            "go" | "green" => Some(LampStyle::Green),
            "off" | "unknown" => Some(LampStyle::Off),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub width: u32,
    pub height: u32,
    pub lamps_min: usize,
    pub lamps_max: usize,
    /// Minimum number of lights per image in each size bin.
    pub quotas: [usize; 4],
    /// Relative-area sampling interval per bin (log-uniform inside).
    pub bin_areas: [(f64, f64); 4],
    /// Sampling weight per vocabulary state.
    pub state_weights: Vec<f64>,
    /// Number of distractor rectangles.
    pub clutter: usize,
    /// Per-channel pixel noise standard deviation, in [0, 1] intensity units.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            width: 2048,
            height: 1536,
            lamps_min: 4,
            lamps_max: 6,
            quotas: [1, 1, 1, 1],
            bin_areas: [(0.65e-4, 1e-4), (1e-4, 3e-4), (3e-4, 5e-4), (5e-4, 1.6e-3)],
            state_weights: vec![0.3, 0.2, 0.3, 0.2],
            clutter: 24,
            noise: 0.02,
        }
    }
}

/// Lights never come closer than this many pixels on a side.
const MIN_LIGHT_SIDE: f64 = 4.0;
const PLACEMENT_ATTEMPTS: usize = 400;

impl SynthConfig {
    pub fn validate(&self, vocab: &StateVocabulary) -> Result<()> {
        let fail = |m: String| Err(Error::Generation(m));
        if self.width < MIN_IMAGE_SIDE || self.height < MIN_IMAGE_SIDE {
            return fail(format!("image dims must be >= {MIN_IMAGE_SIDE}"));
        }
        if self.lamps_min > self.lamps_max {
            return fail("lamps_min exceeds lamps_max".into());
        }
        let quota_total: usize = self.quotas.iter().sum();
        if quota_total > self.lamps_max {
            return fail(format!("quotas need {quota_total} lamps but lamps_max is {}", self.lamps_max));
        }
        if self.state_weights.len() != vocab.len()
            || self.state_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.state_weights.iter().sum::<f64>() <= 0.0
        {
            return fail("state weights must be one non-negative weight per state".into());
        }
        for name in vocab.names() {
            if LampStyle::for_state(name).is_none() {
                return fail(format!("no lamp rendering for state {name:?}"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be >= 0".into());
        }
        let image_area = self.width as f64 * self.height as f64;
        let max_side = self.width.min(self.height) as f64 / 2.0;
        let bin_needed = |b: usize| self.quotas[b] > 0 || self.lamps_max > quota_total;
        for (b, &(lo, hi)) in self.bin_areas.iter().enumerate() {
            let bin = SizeBin::ALL[b];
            if !(lo > 0.0 && lo < hi) {
                return fail(format!("{bin} area range must satisfy 0 < lo < hi"));
            }
            // ranges must stay inside the bin they feed
            if SizeBin::from_relative_area(lo * 1.0001) != bin || SizeBin::from_relative_area(hi * 0.9999) != bin {
                return fail(format!("{bin} area range ({lo}, {hi}) crosses a bin edge"));
            }
            if !bin_needed(b) {
                continue;
            }
            let (s_lo, s_hi) = ((lo * image_area).sqrt(), (hi * image_area).sqrt());
            if s_hi < MIN_LIGHT_SIDE || s_lo > max_side {
                return fail(format!(
                    "{bin} lights would be {s_lo:.1}..{s_hi:.1} px on a {}x{} image",
                    self.width, self.height
                ));
            }
        }
        Ok(())
    }
}

fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    seeded_stream(seed, index)
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

#[derive(Debug, Clone, Copy)]
struct PlacedLight {
    x: f64,
    y: f64,
    side: f64,
    state: usize,
}

struct ScenePlan {
    lights: Vec<PlacedLight>,
}

fn plan_scene(config: &SynthConfig, vocab: &StateVocabulary, rng: &mut ChaCha8Rng) -> Result<ScenePlan> {
    config.validate(vocab)?;
    let quota_total: usize = config.quotas.iter().sum();
    let count = rng.gen_range(config.lamps_min.max(quota_total)..=config.lamps_max.max(quota_total));
    let mut bins: Vec<usize> = (0..4).flat_map(|b| std::iter::repeat(b).take(config.quotas[b])).collect();
    while bins.len() < count {
        bins.push(rng.gen_range(0..4));
    }
    let (w, h) = (config.width as f64, config.height as f64);
    let mut lights: Vec<PlacedLight> = Vec::with_capacity(count);
    for &b in &bins {
        let (lo, hi) = config.bin_areas[b];
        // stay clear of the bin edges so rounding never moves a light across
        let (lo, hi) = (lo.ln() + 0.01, hi.ln() - 0.01);
        let area = rng.gen_range(lo..hi).exp() * w * h;
        let side = area.sqrt().max(MIN_LIGHT_SIDE);
        let state = sample_weighted(rng, &config.state_weights);
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = rng.gen_range(0.0..(w - side));
            let y = rng.gen_range(0.0..(h - side));
            let clear = lights.iter().all(|o| {
                let margin = 0.5 * side.max(o.side);
                x + side + margin <= o.x || o.x + o.side + margin <= x || y + side + margin <= o.y || o.y + o.side + margin <= y
            });
            if clear {
                placed = Some(PlacedLight { x, y, side, state });
                break;
            }
        }
        match placed {
            Some(p) => lights.push(p),
            None => {
                return Err(Error::Generation(format!(
                    "could not place {count} non-overlapping lights in {}x{}",
                    config.width, config.height
                )))
            }
        }
    }
    Ok(ScenePlan { lights })
}

fn generate_record<T: Real>(config: &SynthConfig, vocab: &StateVocabulary, index: u64) -> Result<ImageRecord<T>> {
    let mut rng = scene_rng(config.seed, index);
    let plan = plan_scene(config, vocab, &mut rng)?;
    Ok(record_from_plan(config, &plan, index))
}

fn record_from_plan<T: Real>(config: &SynthConfig, plan: &ScenePlan, index: u64) -> ImageRecord<T> {
    let annotations = plan
        .lights
        .iter()
        .map(|l| Annotation {
            bbox: BBox {
                x_min: T::lit(l.x),
                y_min: T::lit(l.y),
                x_max: T::lit(l.x + l.side),
                y_max: T::lit(l.y + l.side),
            },
            state: l.state,
        })
        .collect();
    ImageRecord {
        id: scene_id(index),
        width: config.width,
        height: config.height,
        annotations,
        image_path: None,
    }
}

pub fn scene_id(index: u64) -> String {
    format!("scene_{index:05}")
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Canvas {
    width: usize,
    height: usize,
    px: Vec<[f32; 3]>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let p = &mut self.px[y * self.width + x];
        for k in 0..3 {
            p[k] = (p[k] as f64 * (1.0 - alpha) + color[k] * alpha) as f32;
        }
    }

    /// Axis-aligned rectangle with exact per-pixel area coverage.
    fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3]) {
        let (w, h) = (self.width as f64, self.height as f64);
        let (x0, y0, x1, y1) = (x0.max(0.0), y0.max(0.0), x1.min(w), y1.min(h));
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        for py in y0.floor() as usize..(y1.ceil() as usize).min(self.height) {
            let cy = (y1.min(py as f64 + 1.0) - y0.max(py as f64)).max(0.0);
            for px in x0.floor() as usize..(x1.ceil() as usize).min(self.width) {
                let cx = (x1.min(px as f64 + 1.0) - x0.max(px as f64)).max(0.0);
                let a = cx * cy;
                if a > 0.0 {
                    self.blend(px, py, color, a);
                }
            }
        }
    }

    /// Disc with 4×4 supersampled coverage.
    fn fill_disc(&mut self, cx: f64, cy: f64, radius: f64, color: [f64; 3]) {
        let r2 = radius * radius;
        let y_lo = (cy - radius).floor().max(0.0) as usize;
        let y_hi = ((cy + radius).ceil() as usize).min(self.height);
        let x_lo = (cx - radius).floor().max(0.0) as usize;
        let x_hi = ((cx + radius).ceil() as usize).min(self.width);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let mut hits = 0u32;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let dx = px as f64 + (sx as f64 + 0.5) / 4.0 - cx;
                        let dy = py as f64 + (sy as f64 + 0.5) / 4.0 - cy;
                        hits += (dx * dx + dy * dy <= r2) as u32;
                    }
                }
                if hits > 0 {
                    self.blend(px, py, color, hits as f64 / 16.0);
                }
            }
        }
    }
}

/// Renders scene `index` of the configured stream. Deterministic in
/// `(config.seed, index)`.
pub fn generate_scene<T: Real>(
    config: &SynthConfig,
    vocab: &StateVocabulary,
    index: u64,
) -> Result<(RgbImage, ImageRecord<T>)> {
    let mut rng = scene_rng(config.seed, index);
    let plan = plan_scene(config, vocab, &mut rng)?;
    let (w, h) = (config.width as usize, config.height as usize);

    // background: vertical gradient, lighter at the top
    let top = rng.gen_range(0.62..0.85);
    let bottom = rng.gen_range(0.34..0.5);
    let tint = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), rng.gen_range(0.0..0.06)];
    let mut canvas = Canvas { width: w, height: h, px: Vec::with_capacity(w * h) };
    for y in 0..h {
        let t = y as f64 / (h - 1).max(1) as f64;
        let base = top * (1.0 - t) + bottom * t;
        let row = [(base + tint[0]) as f32, (base + tint[1]) as f32, (base + tint[2]) as f32];
        canvas.px.extend(std::iter::repeat(row).take(w));
    }

    for _ in 0..config.clutter {
        let pole = rng.gen_bool(0.25);
        let (rw, rh) = if pole {
            (rng.gen_range(3.0..9.0), rng.gen_range(80.0..(h as f64 * 0.6)))
        } else {
            (rng.gen_range(8f64.ln()..240f64.ln()).exp(), rng.gen_range(8f64.ln()..240f64.ln()).exp())
        };
        let x = rng.gen_range(-rw * 0.5..w as f64 - rw * 0.5);
        let y = rng.gen_range(-rh * 0.5..h as f64 - rh * 0.5);
        let hue = rng.gen_range(0.0..360.0);
        let sat = rng.gen_range(0.0..0.35);
        let val = rng.gen_range(0.35..0.92);
        canvas.fill_rect(x, y, x + rw, y + rh, hsv_to_rgb(hue, sat, val));
    }

    for light in &plan.lights {
        let housing = rng.gen_range(0.05..0.13);
        canvas.fill_rect(light.x, light.y, light.x + light.side, light.y + light.side, [housing; 3]);
        let name = vocab.name(light.state).expect("state from vocabulary");
        let style = LampStyle::for_state(name).expect("validated lamp style");
        let lamp = match style {
            LampStyle::Red => hsv_to_rgb(rng.gen_range(-10.0..10.0), rng.gen_range(0.85..1.0), rng.gen_range(0.9..1.0)),
            LampStyle::Amber => hsv_to_rgb(rng.gen_range(38.0..52.0), rng.gen_range(0.85..1.0), rng.gen_range(0.9..1.0)),
            LampStyle::Green => hsv_to_rgb(rng.gen_range(105.0..135.0), rng.gen_range(0.85..1.0), rng.gen_range(0.9..1.0)),
            LampStyle::Off => hsv_to_rgb(rng.gen_range(0.0..360.0), 0.1, rng.gen_range(0.22..0.3)),
        };
        let half = light.side / 2.0;
        canvas.fill_disc(light.x + half, light.y + half, 0.3 * light.side, lamp);
    }

    let amp = config.noise * 3f64.sqrt();
    let mut img = RgbImage::new(config.width, config.height);
    for (dst, src) in img.as_mut().chunks_exact_mut(3).zip(&canvas.px) {
        for k in 0..3 {
            let noise = if amp > 0.0 { rng.gen_range(-amp..amp) } else { 0.0 };
            dst[k] = ((src[k] as f64 + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok((img, record_from_plan(config, &plan, index)))
}

/// Writes `count` scenes starting at `first_index`: PNG rasters under
/// `dir/images/` and the JSON-lines file `dir/dataset.jsonl`.
pub fn write_synthetic_dataset(
    config: &SynthConfig,
    vocab: &StateVocabulary,
    first_index: u64,
    count: usize,
    dir: &Path,
) -> Result<Vec<ImageRecord<f64>>> {
    let images = dir.join("images");
    fs::create_dir_all(&images)?;
    let mut records = Vec::with_capacity(count);
    for index in first_index..first_index + count as u64 {
        let (img, mut record) = generate_scene::<f64>(config, vocab, index)?;
        let rel = format!("images/{}.png", record.id);
        let mut png = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)?;
        write_atomic(&dir.join(&rel), &png)?;
        record.image_path = Some(rel);
        records.push(record);
    }
    save_dataset(&records, vocab, &dir.join("dataset.jsonl"))?;
    Ok(records)
}

/// Fraction of annotations per size bin.
pub fn bin_histogram<T: Real>(records: &[ImageRecord<T>]) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for r in records {
        for a in &r.annotations {
            counts[size_bin(a, r.width, r.height).index()] += 1;
        }
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    counts.map(|c| c as f64 / total)
}

/// True when no two annotations of a record overlap.
pub fn annotations_disjoint<T: Real>(record: &ImageRecord<T>) -> bool {
    let a = &record.annotations;
    (0..a.len()).all(|i| (i + 1..a.len()).all(|j| iou(&a[i].bbox, &a[j].bbox) == T::zero()))
}

/// Hue class of a rendered pixel, for tests and diagnostics.
pub fn pixel_hue(p: [u8; 3]) -> (f64, f64, f64) {
    rgb_to_hsv(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> SynthConfig {
        SynthConfig { width: 640, height: 480, clutter: 6, ..SynthConfig::default() }
    }

    #[test]
    fn scenes_are_deterministic() {
        let vocab = StateVocabulary::default();
        let cfg = small_config();
        let (a, ra) = generate_scene::<f64>(&cfg, &vocab, 3).unwrap();
        let (b, rb) = generate_scene::<f64>(&cfg, &vocab, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        let (c, _) = generate_scene::<f64>(&cfg, &vocab, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn annotations_inside_image_and_disjoint() {
        let vocab = StateVocabulary::default();
        let cfg = small_config();
        for i in 0..20 {
            let (_, r) = generate_scene::<f64>(&cfg, &vocab, i).unwrap();
            assert!(r.validate(&vocab).is_ok());
            assert!(annotations_disjoint(&r));
            assert!((4..=6).contains(&r.annotations.len()));
        }
    }

    #[test]
    fn quotas_land_in_distinct_bins() {
        let vocab = StateVocabulary::default();
        let cfg = SynthConfig { width: 1280, height: 960, lamps_min: 4, lamps_max: 4, ..SynthConfig::default() };
        for i in 0..10 {
            let (_, r) = generate_scene::<f64>(&cfg, &vocab, i).unwrap();
            let mut bins: Vec<SizeBin> = r.annotations.iter().map(|a| size_bin(a, 1280, 960)).collect();
            bins.sort();
            assert_eq!(bins, SizeBin::ALL.to_vec());
        }
    }

    #[test]
    fn unsatisfiable_quotas_fail() {
        let vocab = StateVocabulary::default();
        let too_many = SynthConfig { quotas: [3, 3, 3, 3], lamps_max: 6, ..small_config() };
        assert!(matches!(generate_scene::<f64>(&too_many, &vocab, 0), Err(Error::Generation(_))));
        // tiny lights on a 64×64 image would be under a pixel wide
        let tiny_image = SynthConfig { width: 64, height: 64, ..small_config() };
        assert!(matches!(generate_scene::<f64>(&tiny_image, &vocab, 0), Err(Error::Generation(_))));
        let crowded = SynthConfig {
            width: 64,
            height: 64,
            quotas: [0, 0, 0, 6],
            lamps_min: 6,
            bin_areas: [(0.65e-4, 1e-4), (1e-4, 3e-4), (3e-4, 5e-4), (0.05, 0.2)],
            ..small_config()
        };
        assert!(matches!(generate_scene::<f64>(&crowded, &vocab, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn lamp_hue_follows_state() {
        let vocab = StateVocabulary::default();
        let cfg = small_config();
        let (img, r) = generate_scene::<f64>(&cfg, &vocab, 7).unwrap();
        for a in &r.annotations {
            let (cx, cy) = a.bbox.center();
            let p = img.get_pixel(cx as u32, cy as u32).0;
            let (h, s, v) = pixel_hue(p);
            match vocab.name(a.state).unwrap() {
                "stop" => assert!((h <= 15.0 || h >= 345.0) && s > 0.6 && v > 0.8),
                "warning" => assert!((35.0..=55.0).contains(&h) && s > 0.6),
                "go" => assert!((100.0..=140.0).contains(&h) && s > 0.6),
                _ => assert!(v < 0.4),
            }
        }
    }

    #[test]
    fn dataset_roundtrip_and_empty_file() {
        let vocab = StateVocabulary::default();
        let cfg = small_config();
        let records: Vec<ImageRecord<f64>> = (0..5)
            .map(|i| {
                let mut r = generate_scene::<f64>(&cfg, &vocab, i).unwrap().1;
                r.image_path = (i % 2 == 0).then(|| format!("images/{}.png", r.id));
                r
            })
            .collect();
        let dir = std::env::temp_dir().join(format!("tlp-data-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.jsonl");
        save_dataset(&records, &vocab, &path).unwrap();
        assert_eq!(load_dataset::<f64>(&path, &vocab).unwrap(), records);

        save_dataset::<f64>(&[], &vocab, &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert!(load_dataset::<f64>(&path, &vocab).unwrap().is_empty());
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn loader_rejects_bad_records() {
        let vocab = StateVocabulary::default();
        let ok = r#"{"id":"a","width":100,"height":100,"annotations":[{"box":[1,1,10,10],"state":"go"}]}"#;
        let outside = r#"{"id":"b","width":100,"height":100,"annotations":[{"box":[90,90,120,110],"state":"go"}]}"#;
        let text = format!("{ok}\n{outside}\n");
        match parse_dataset::<f64>(&text, &vocab) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected validation error, got {other:?}"),
        }
        match parse_dataset::<f64>(&format!("{ok}\n{{not json\n"), &vocab) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let unknown = r#"{"id":"c","width":100,"height":100,"annotations":[{"box":[1,1,10,10],"state":"purple"}]}"#;
        assert!(matches!(parse_dataset::<f64>(unknown, &vocab), Err(Error::Validation { line: 1, .. })));
        assert!(matches!(parse_dataset::<f64>(&format!("{ok}\n{ok}"), &vocab), Err(Error::Validation { line: 2, .. })));
    }
}
