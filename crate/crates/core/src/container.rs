//! Model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TLPM"  u32 version  u32 kind  payload
//! kind 1 attention: u32 channels, u32 levels, then one network per level
//! kind 2 proposer:  u32 channels, trunk, score head, mask head
//! kind 3 detector:  u32 channels, u32 states, head
//! ```
//!
//! Each network is the record written by [`DenseNet::write_to`]: `"DNET"`,
//! `u32` version, `u32` layer count, and per layer `u32` inputs, `u32`
//! outputs, `u8` activation (0 identity, 1 ReLU, 2 logistic), then the
//! row-major `outputs × inputs` weights followed by the biases as `f64`.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::attention::AttentionModel;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::formats::write_atomic;
use crate::nn::{read_u32, DenseNet};
use crate::proposer::ProposerModel;
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"TLPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Attention = 1,
    Proposer = 2,
    Detector = 3,
}

impl ModelKind {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            1 => Ok(Self::Attention),
            2 => Ok(Self::Proposer),
            3 => Ok(Self::Detector),
            _ => Err(Error::Container(format!("unknown model kind {code}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Attention => "attention",
            Self::Proposer => "proposer",
            Self::Detector => "detector",
        }
    }
}

fn header(kind: ModelKind) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    out
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn push_net<T: Real>(out: &mut Vec<u8>, net: &DenseNet<T>) {
    net.write_to(out).expect("writing to memory");
}

fn open(bytes: &[u8], expected: ModelKind) -> Result<Cursor<&[u8]>> {
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Container("file too short for a model header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Container("not a model file (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Container(format!("unsupported model version {version}")));
    }
    let kind = ModelKind::from_code(read_u32(&mut r)?)?;
    if kind != expected {
        return Err(Error::Container(format!("expected a {} model, found a {} model", expected.name(), kind.name())));
    }
    Ok(r)
}

fn finish(r: &Cursor<&[u8]>) -> Result<()> {
    if (r.position() as usize) != r.get_ref().len() {
        return Err(Error::Container("trailing bytes after model payload".into()));
    }
    Ok(())
}

pub fn encode_attention<T: Real>(m: &AttentionModel<T>) -> Vec<u8> {
    let mut out = header(ModelKind::Attention);
    push_u32(&mut out, m.channels());
    push_u32(&mut out, m.nets().len());
    for n in m.nets() {
        push_net(&mut out, n);
    }
    out
}

pub fn decode_attention<T: Real>(bytes: &[u8]) -> Result<AttentionModel<T>> {
    let mut r = open(bytes, ModelKind::Attention)?;
    let channels = read_u32(&mut r)? as usize;
    let levels = read_u32(&mut r)? as usize;
    if levels > 64 {
        return Err(Error::Container(format!("implausible level count {levels}")));
    }
    let nets = (0..levels).map(|_| DenseNet::read_from(&mut r)).collect::<Result<Vec<_>>>()?;
    finish(&r)?;
    AttentionModel::new(channels, nets)
}

pub fn encode_proposer<T: Real>(m: &ProposerModel<T>) -> Vec<u8> {
    let mut out = header(ModelKind::Proposer);
    push_u32(&mut out, m.channels());
    push_net(&mut out, &m.trunk);
    push_net(&mut out, &m.score_head);
    push_net(&mut out, &m.mask_head);
    out
}

pub fn decode_proposer<T: Real>(bytes: &[u8]) -> Result<ProposerModel<T>> {
    let mut r = open(bytes, ModelKind::Proposer)?;
    let channels = read_u32(&mut r)? as usize;
    let trunk = DenseNet::read_from(&mut r)?;
    let score = DenseNet::read_from(&mut r)?;
    let mask = DenseNet::read_from(&mut r)?;
    finish(&r)?;
    ProposerModel::new(channels, trunk, score, mask)
}

pub fn encode_detector<T: Real>(m: &DetectorModel<T>) -> Vec<u8> {
    let mut out = header(ModelKind::Detector);
    push_u32(&mut out, m.channels());
    push_u32(&mut out, m.states());
    push_net(&mut out, &m.net);
    out
}

pub fn decode_detector<T: Real>(bytes: &[u8]) -> Result<DetectorModel<T>> {
    let mut r = open(bytes, ModelKind::Detector)?;
    let channels = read_u32(&mut r)? as usize;
    let states = read_u32(&mut r)? as usize;
    let net = DenseNet::read_from(&mut r)?;
    finish(&r)?;
    DetectorModel::new(channels, states, net)
}

fn read_model_file(path: &Path, kind: ModelKind) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Container(format!("cannot read {} model {}: {e}", kind.name(), path.display())))
}

pub fn save_attention<T: Real>(path: &Path, m: &AttentionModel<T>) -> Result<()> {
    write_atomic(path, &encode_attention(m))
}

pub fn load_attention<T: Real>(path: &Path) -> Result<AttentionModel<T>> {
    decode_attention(&read_model_file(path, ModelKind::Attention)?)
}

pub fn save_proposer<T: Real>(path: &Path, m: &ProposerModel<T>) -> Result<()> {
    write_atomic(path, &encode_proposer(m))
}

pub fn load_proposer<T: Real>(path: &Path) -> Result<ProposerModel<T>> {
    decode_proposer(&read_model_file(path, ModelKind::Proposer)?)
}

pub fn save_detector<T: Real>(path: &Path, m: &DetectorModel<T>) -> Result<()> {
    write_atomic(path, &encode_detector(m))
}

pub fn load_detector<T: Real>(path: &Path) -> Result<DetectorModel<T>> {
    decode_detector(&read_model_file(path, ModelKind::Detector)?)
}
