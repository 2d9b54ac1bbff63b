//! `key = value` run configuration, one setting per line, `#` comments.
//! Settings start from [`PipelineConfig::default`]; unknown or repeated keys
//! are errors.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Every accepted key, in the order [`render`] writes them.
pub const KEYS: [&str; 33] = [
    "seed",
    "train_scenes",
    "test_scenes",
    "width",
    "height",
    "lamps_min",
    "lamps_max",
    "clutter",
    "noise",
    "attention.learning_rate",
    "attention.epochs",
    "attention.batch_size",
    "attention.hidden",
    "proposer.learning_rate",
    "proposer.epochs",
    "proposer.batch_size",
    "proposer.hidden",
    "proposer.mask_weight",
    "tau",
    "budget",
    "top_n",
    "proposal_nms",
    "theta",
    "detector.learning_rate",
    "detector.epochs",
    "detector.batch_size",
    "detector.hidden",
    "detector.proposals",
    "detector.max_positives",
    "score_threshold",
    "detection_nms",
    "iou",
    "ar_budgets",
];

fn value<T: FromStr>(v: &str, line: usize, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| Error::Parse { line, message: format!("{key}: {e}") })
}

fn list(v: &str, line: usize, key: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| value(p.trim(), line, key)).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn apply(c: &mut PipelineConfig, key: &str, v: &str, line: usize) -> Result<()> {
    match key {
        "seed" => c.set_seed(value(v, line, key)?),
        "train_scenes" => c.train_scenes = value(v, line, key)?,
        "test_scenes" => c.test_scenes = value(v, line, key)?,
        "width" => c.synth.width = value(v, line, key)?,
        "height" => c.synth.height = value(v, line, key)?,
        "lamps_min" => c.synth.lamps_min = value(v, line, key)?,
        "lamps_max" => c.synth.lamps_max = value(v, line, key)?,
        "clutter" => c.synth.clutter = value(v, line, key)?,
        "noise" => c.synth.noise = value(v, line, key)?,
        "attention.learning_rate" => c.attention.train.learning_rate = value(v, line, key)?,
        "attention.epochs" => c.attention.train.epochs = value(v, line, key)?,
        "attention.batch_size" => c.attention.train.batch_size = value(v, line, key)?,
        "attention.hidden" => c.attention.hidden = value(v, line, key)?,
        "proposer.learning_rate" => c.proposer.train.learning_rate = value(v, line, key)?,
        "proposer.epochs" => c.proposer.train.epochs = value(v, line, key)?,
        "proposer.batch_size" => c.proposer.train.batch_size = value(v, line, key)?,
        "proposer.hidden" => c.proposer.hidden = list(v, line, key)?,
        "proposer.mask_weight" => c.proposer.mask_weight = value(v, line, key)?,
        "tau" => {
            let tau = value(v, line, key)?;
            c.proposer.proposer.tau = tau;
            c.detector.detect.proposer.tau = tau;
        }
        "budget" => c.set_budget(value(v, line, key)?),
        "top_n" => {
            let n = value(v, line, key)?;
            c.proposer.proposer.top_n = n;
            c.detector.detect.proposer.top_n = n;
        }
        "proposal_nms" => {
            let t = value(v, line, key)?;
            c.proposer.proposer.nms = t;
            c.detector.detect.proposer.nms = t;
        }
        "theta" => {
            let t = value(v, line, key)?;
            c.proposer.proposer.theta = t;
            c.detector.detect.proposer.theta = t;
        }
        "detector.learning_rate" => c.detector.train.learning_rate = value(v, line, key)?,
        "detector.epochs" => c.detector.train.epochs = value(v, line, key)?,
        "detector.batch_size" => c.detector.train.batch_size = value(v, line, key)?,
        "detector.hidden" => c.detector.hidden = list(v, line, key)?,
        "detector.proposals" => c.detector.detect.proposals = value(v, line, key)?,
        "detector.max_positives" => c.detector.max_positives = value(v, line, key)?,
        "score_threshold" => c.detector.detect.score_threshold = value(v, line, key)?,
        "detection_nms" => c.detector.detect.nms = value(v, line, key)?,
        "iou" => c.iou = value(v, line, key)?,
        "ar_budgets" => c.budgets = list(v, line, key)?,
        _ => return Err(Error::Parse { line, message: format!("unknown key {key:?}") }),
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<PipelineConfig> {
    let mut c = PipelineConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, v) = content
            .split_once('=')
            .ok_or_else(|| Error::Parse { line, message: format!("expected `key = value`, got {content:?}") })?;
        let key = key.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse { line, message: format!("key {key:?} given twice") });
        }
        apply(&mut c, key, v.trim(), line)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn load(path: &Path) -> Result<PipelineConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text)
}

/// The settings of `c` in the accepted syntax, one key per line.
pub fn render(c: &PipelineConfig) -> String {
    let p = &c.detector.detect.proposer;
    let values: [String; 33] = [
        c.synth.seed.to_string(),
        c.train_scenes.to_string(),
        c.test_scenes.to_string(),
        c.synth.width.to_string(),
        c.synth.height.to_string(),
        c.synth.lamps_min.to_string(),
        c.synth.lamps_max.to_string(),
        c.synth.clutter.to_string(),
        c.synth.noise.to_string(),
        c.attention.train.learning_rate.to_string(),
        c.attention.train.epochs.to_string(),
        c.attention.train.batch_size.to_string(),
        c.attention.hidden.to_string(),
        c.proposer.train.learning_rate.to_string(),
        c.proposer.train.epochs.to_string(),
        c.proposer.train.batch_size.to_string(),
        join(&c.proposer.hidden),
        c.proposer.mask_weight.to_string(),
        p.tau.to_string(),
        p.budget.to_string(),
        p.top_n.to_string(),
        p.nms.to_string(),
        p.theta.to_string(),
        c.detector.train.learning_rate.to_string(),
        c.detector.train.epochs.to_string(),
        c.detector.train.batch_size.to_string(),
        join(&c.detector.hidden),
        c.detector.detect.proposals.to_string(),
        c.detector.max_positives.to_string(),
        c.detector.detect.score_threshold.to_string(),
        c.detector.detect.nms.to_string(),
        c.iou.to_string(),
        join(&c.budgets),
    ];
    KEYS.iter().zip(values).map(|(k, v)| format!("{k} = {v}\n")).collect()
}
