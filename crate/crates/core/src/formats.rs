//! JSON-lines interchange for proposals and detections, plus atomic file
//! writes used by every output path.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::error::{Error, Result};
use crate::geometry::{BBox, StateVocabulary};
use crate::proposer::Proposal;
use crate::scalar::Real;

/// Writes to a sibling temporary file and renames it into place, so the
/// destination is either complete or untouched.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        fs::remove_file(&tmp).ok();
    }
    Ok(result?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProposalLine {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionLine {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub state: String,
    pub confidence: f64,
}

pub fn to_jsonl<S: Serialize>(lines: &[S]) -> Result<String> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(l).map_err(|e| Error::Config(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<S: Serialize>(path: &Path, lines: &[S]) -> Result<()> {
    write_atomic(path, to_jsonl(lines)?.as_bytes())
}

pub fn parse_jsonl<S: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<S>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    parse_jsonl(&fs::read_to_string(path)?)
}

fn box_from_array<T: Real>(a: [f64; 4], line: usize) -> Result<BBox<T>> {
    BBox::new(T::lit(a[0]), T::lit(a[1]), T::lit(a[2]), T::lit(a[3]))
        .map_err(|e| Error::Validation { line, message: e.to_string() })
}

impl DetectionLine {
    pub fn state_index(&self, vocab: &StateVocabulary, line: usize) -> Result<usize> {
        vocab.index_of(&self.state).ok_or_else(|| Error::Validation {
            line,
            message: format!("unknown state {:?}", self.state),
        })
    }
}

fn image_slot(index: &HashMap<&str, usize>, id: &str, line: usize) -> Result<usize> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| Error::Validation { line, message: format!("image {id:?} is not in the dataset") })
}

fn index_ids(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
}

/// Groups detection lines by the dataset image they refer to.
pub fn detections_by_image<T: Real>(
    lines: &[DetectionLine],
    ids: &[String],
    vocab: &StateVocabulary,
) -> Result<Vec<Vec<Detection<T>>>> {
    let index = index_ids(ids);
    let mut out = vec![Vec::new(); ids.len()];
    for (i, l) in lines.iter().enumerate() {
        let slot = image_slot(&index, &l.image_id, i + 1)?;
        if !(0.0..=1.0).contains(&l.confidence) {
            return Err(Error::Validation { line: i + 1, message: format!("confidence {} outside [0, 1]", l.confidence) });
        }
        out[slot].push(Detection {
            bbox: box_from_array(l.bbox, i + 1)?,
            state: l.state_index(vocab, i + 1)?,
            confidence: T::lit(l.confidence),
        });
    }
    Ok(out)
}

/// Groups proposal lines by image, ranked by descending score (file order
/// among ties).
pub fn proposals_by_image<T: Real>(lines: &[ProposalLine], ids: &[String]) -> Result<Vec<Vec<BBox<T>>>> {
    let index = index_ids(ids);
    let mut scored: Vec<Vec<(f64, BBox<T>)>> = vec![Vec::new(); ids.len()];
    for (i, l) in lines.iter().enumerate() {
        let slot = image_slot(&index, &l.image_id, i + 1)?;
        if !l.score.is_finite() {
            return Err(Error::Validation { line: i + 1, message: "non-finite proposal score".into() });
        }
        scored[slot].push((l.score, box_from_array(l.bbox, i + 1)?));
    }
    Ok(scored
        .into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0));
            v.into_iter().map(|(_, b)| b).collect()
        })
        .collect())
}

pub fn detection_lines<T: Real>(image_id: &str, detections: &[Detection<T>], vocab: &StateVocabulary) -> Vec<DetectionLine> {
    detections
        .iter()
        .map(|d| DetectionLine {
            image_id: image_id.to_string(),
            bbox: d.bbox.to_array(),
            state: vocab.name(d.state).unwrap_or("?").to_string(),
            confidence: d.confidence.as_f64(),
        })
        .collect()
}

pub fn proposal_lines<T: Real>(image_id: &str, proposals: &[Proposal<T>]) -> Vec<ProposalLine> {
    proposals
        .iter()
        .map(|p| ProposalLine { image_id: image_id.to_string(), bbox: p.bbox.to_array(), score: p.score.as_f64() })
        .collect()
}
