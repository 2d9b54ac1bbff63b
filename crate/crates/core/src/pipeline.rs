//! Three-stage training, split evaluation, the desk benchmark and the
//! detection-head ablation.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attention::{train_attention, AttentionModel, AttentionTrainConfig};
use crate::data::{SceneSource, SynthConfig, SynthDataset};
use crate::detector::{
    collect_detector_samples, detect_pooled, fit_detector, pool_rois, train_detector_gated, DetectorModel,
    DetectorTrainConfig, PooledRois,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalImage, EvalReport, DEFAULT_BUDGETS, DEFAULT_IOU};
use crate::geometry::{BBox, StateVocabulary};
use crate::nn::TrainLog;
use crate::parallel::ordered_map;
use crate::proposer::{propose_pyramid, train_proposer_gated, ProposerConfig, ProposerModel, ProposerTrainConfig};
use crate::pyramid::{build_pyramid, FeatureProvider, SyntheticBackbone};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub attention: AttentionTrainConfig,
    pub proposer: ProposerTrainConfig,
    pub detector: DetectorTrainConfig,
    pub budgets: Vec<usize>,
    pub iou: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_scenes: 200,
            test_scenes: 50,
            attention: AttentionTrainConfig::default(),
            proposer: ProposerTrainConfig::default(),
            detector: DetectorTrainConfig::default(),
            budgets: DEFAULT_BUDGETS.to_vec(),
            iou: DEFAULT_IOU,
        }
    }
}

impl PipelineConfig {
    /// Uses `seed` for scene generation and every training stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.set_seed(seed);
        self
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.attention.train.seed = seed;
        self.proposer.train.seed = seed;
        self.detector.train.seed = seed;
    }

    /// Applies one proposal budget to the gating, training and inference
    /// paths.
    pub fn set_budget(&mut self, budget: usize) {
        self.proposer.proposer.budget = budget;
        self.detector.detect.proposer.budget = budget;
    }

    pub fn inference(&self) -> ProposerConfig {
        self.detector.detect.proposer.clone()
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        self.proposer.validate()?;
        self.detector.validate()?;
        if !(self.iou > 0.0 && self.iou <= 1.0) {
            return Err(Error::Config(format!("IoU threshold {} must lie in (0, 1]", self.iou)));
        }
        Ok(())
    }

    pub fn train_split<T: Real>(&self, vocab: &StateVocabulary) -> Result<SynthDataset<T>> {
        SynthDataset::new(self.synth.clone(), vocab.clone(), 0, self.train_scenes)
    }

    /// Test scenes follow the training scenes in the same index space.
    pub fn test_split<T: Real>(&self, vocab: &StateVocabulary) -> Result<SynthDataset<T>> {
        SynthDataset::new(self.synth.clone(), vocab.clone(), self.train_scenes as u64, self.test_scenes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModels<T> {
    pub attention: AttentionModel<T>,
    pub proposer: ProposerModel<T>,
    pub detector: DetectorModel<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageLogs {
    pub attention: TrainLog,
    pub proposer: TrainLog,
    pub detector: TrainLog,
    pub timings: Vec<(String, Duration)>,
}

pub fn train_all<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    states: usize,
    config: &PipelineConfig,
) -> Result<(TrainedModels<T>, StageLogs)> {
    config.validate()?;
    let mut logs = StageLogs::default();
    let t = Instant::now();
    let (attention, log) = train_attention(dataset, backbone, &config.attention)?;
    logs.attention = log;
    logs.timings.push(("attention".into(), t.elapsed()));
    let t = Instant::now();
    let (proposer, log, gated) = train_proposer_gated(dataset, backbone, &attention, &config.proposer)?;
    logs.proposer = log;
    logs.timings.push(("proposer".into(), t.elapsed()));
    let t = Instant::now();
    let (p, d) = (&config.proposer.proposer, &config.detector.detect.proposer);
    let gated = gated.filter(|_| p.tau == d.tau && p.budget == d.budget);
    let (detector, log) =
        train_detector_gated(dataset, backbone, &attention, &proposer, states, &config.detector, gated.as_deref())?;
    logs.detector = log;
    logs.timings.push(("detector".into(), t.elapsed()));
    Ok((TrainedModels { attention, proposer, detector }, logs))
}

/// Per test image: the ranked proposal boxes (for AR) and the pooled RoIs
/// of the detector's share of them.
pub struct SplitProposals<T> {
    pub proposals: Vec<Vec<BBox<T>>>,
    pub rois: Vec<PooledRois<T>>,
}

pub fn propose_split<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    config: &PipelineConfig,
) -> Result<SplitProposals<T>> {
    let inference = config.inference();
    let keep = config.detector.detect.proposals;
    let per_image = ordered_map(dataset.len(), |i| -> Result<(Vec<BBox<T>>, PooledRois<T>)> {
        let pyramid = build_pyramid(&dataset.image(i)?, backbone)?;
        let boxes: Vec<BBox<T>> =
            propose_pyramid(&pyramid, attention, proposer, &inference)?.into_iter().map(|p| p.bbox).collect();
        let rois = pool_rois(&pyramid, boxes[..boxes.len().min(keep)].to_vec());
        Ok((boxes, rois))
    });
    let mut out = SplitProposals { proposals: Vec::new(), rois: Vec::new() };
    for r in per_image {
        let (p, rois) = r?;
        out.proposals.push(p);
        out.rois.push(rois);
    }
    Ok(out)
}

pub fn evaluate_with<T: Real>(
    dataset: &dyn SceneSource<T>,
    split: &SplitProposals<T>,
    detector: &DetectorModel<T>,
    vocab: &StateVocabulary,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    let detections = ordered_map(split.rois.len(), |i| detect_pooled(detector, &split.rois[i], &config.detector.detect))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<EvalImage<'_, T>> = dataset
        .records()
        .iter()
        .zip(&detections)
        .map(|(r, d)| EvalImage { width: r.width, height: r.height, annotations: &r.annotations, detections: d })
        .collect();
    evaluate(&images, Some(&split.proposals), vocab, &config.budgets, config.iou)
}

pub fn evaluate_split<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    dataset: &dyn SceneSource<T>,
    backbone: &P,
    models: &TrainedModels<T>,
    vocab: &StateVocabulary,
    config: &PipelineConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let split = propose_split(dataset, backbone, &models.attention, &models.proposer, config)?;
    evaluate_with(dataset, &split, &models.detector, vocab, config)
}

pub struct BenchmarkRun<T> {
    pub models: TrainedModels<T>,
    pub logs: StageLogs,
    pub report: EvalReport,
    pub elapsed: Duration,
}

/// Generates both splits, trains all three stages on the training split
/// and evaluates on the test split.
pub fn run_benchmark<T: Real>(vocab: &StateVocabulary, config: &PipelineConfig) -> Result<BenchmarkRun<T>> {
    let start = Instant::now();
    config.validate()?;
    let backbone = SyntheticBackbone::default();
    let train = config.train_split::<T>(vocab)?;
    let test = config.test_split::<T>(vocab)?;
    let (models, mut logs) = train_all(&train, &backbone, vocab.len(), config)?;
    let t = Instant::now();
    let report = evaluate_split(&test, &backbone, &models, vocab, config)?;
    logs.timings.push(("evaluation".into(), t.elapsed()));
    Ok(BenchmarkRun { models, logs, report, elapsed: start.elapsed() })
}

pub const ABLATION_HEADS: [(usize, usize); 3] = [(2, 1024), (4, 2048), (5, 2048)];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub head: String,
    pub layers: usize,
    pub width: usize,
    pub map: f64,
    pub map_weighted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<10} {:>8} {:>13}\n", "head", "mAP", "mAP_weighted");
        for r in &self.rows {
            s.push_str(&format!("{:<10} {:>8.4} {:>13.4}\n", r.head, r.map, r.map_weighted));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map(|s| s + "\n").map_err(|e| Error::Config(e.to_string()))
    }
}

/// Retrains only the detection head for each `(layers, width)` shape on the
/// same proposal stack and RoI samples, and evaluates each on `test`.
#[allow(clippy::too_many_arguments)]
pub fn ablate_heads<T: Real, P: FeatureProvider<T> + Sync + ?Sized>(
    train: &dyn SceneSource<T>,
    test: &dyn SceneSource<T>,
    backbone: &P,
    attention: &AttentionModel<T>,
    proposer: &ProposerModel<T>,
    vocab: &StateVocabulary,
    heads: &[(usize, usize)],
    config: &PipelineConfig,
) -> Result<AblationTable> {
    config.validate()?;
    if heads.iter().any(|&(l, w)| l == 0 || w == 0) {
        return Err(Error::Config("ablation heads need at least one non-empty layer".into()));
    }
    let samples = collect_detector_samples(train, backbone, attention, proposer, vocab.len(), &config.detector)?;
    let split = propose_split(test, backbone, attention, proposer, config)?;
    let mut rows = Vec::new();
    for &(layers, width) in heads {
        let mut dc = config.detector.clone();
        dc.hidden = vec![width; layers];
        let (model, _) = fit_detector(backbone.channels(), vocab.len(), &samples, &dc)?;
        let report = evaluate_with(test, &split, &model, vocab, config)?;
        rows.push(AblationRow {
            head: format!("{layers}x{width}"),
            layers,
            width,
            map: report.map,
            map_weighted: report.map_weighted,
        });
    }
    Ok(AblationTable { rows })
}
