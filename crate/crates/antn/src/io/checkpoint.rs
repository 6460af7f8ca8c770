//! Binary checkpoint format for trained models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   5 bytes  "ANTN1"
//! version u16      1
//! count   u16      number of network entries
//! entry:  head u8, classes u16, filters u16, in_channels u16,
//!         param_count u64, params as f64 bits
//! ```
//!
//! Head codes: 0 clean, 1 row-softmax transition, 2 uniform-remainder
//! transition, 3 global transition matrix (logits; filters and in_channels
//! zero, param count classes squared). The entry sequence identifies the
//! model: [0] a plain net, [0, 3] the global-matrix pair, [0, 1, 1] or
//! [0, 2, 2] the three-network model. Round trips are bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::net::{HeadKind, MiniUNet, MiniUNetSpec};
use crate::train::{AntnModel, NtnModel, NtnTransitionLayer};

const MAGIC: &[u8; 5] = b"ANTN1";
const VERSION: u16 = 1;
/// Head code for the global matrix entry; network heads use their own tag.
const GLOBAL_MATRIX: u8 = 3;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("{0} trailing bytes after the declared networks")]
    TrailingData(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite parameter in network entry {entry}")]
    NonFinite { entry: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Any model the trainers produce.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Unet(MiniUNet),
    Ntn(NtnModel),
    Antn(AntnModel),
}

impl TrainedModel {
    pub fn num_classes(&self) -> usize {
        match self {
            TrainedModel::Unet(n) => n.spec().num_classes,
            TrainedModel::Ntn(m) => m.clean.spec().num_classes,
            TrainedModel::Antn(m) => m.clean.spec().num_classes,
        }
    }

    /// The clean-label predictor every variant carries.
    pub fn clean_net(&self) -> &MiniUNet {
        match self {
            TrainedModel::Unet(n) => n,
            TrainedModel::Ntn(m) => &m.clean,
            TrainedModel::Antn(m) => &m.clean,
        }
    }

    /// Guards a checkpoint against a run configured for a different class
    /// count.
    pub fn require_classes(&self, expected: usize) -> Result<(), CheckpointError> {
        let got = self.num_classes();
        if got != expected {
            return Err(CheckpointError::ShapeMismatch(format!(
                "checkpoint has {got} classes, run expects {expected}"
            )));
        }
        Ok(())
    }
}

fn head_code(head: HeadKind) -> u8 {
    match head {
        HeadKind::Clean => 0,
        HeadKind::TransitionRowSoftmax => 1,
        HeadKind::TransitionUniformRemainder => 2,
    }
}

fn push_net(out: &mut Vec<u8>, net: &MiniUNet) {
    let spec = net.spec();
    out.push(head_code(net.head()));
    out.extend_from_slice(&(spec.num_classes as u16).to_le_bytes());
    out.extend_from_slice(&(spec.base_filters as u16).to_le_bytes());
    out.extend_from_slice(&(spec.in_channels as u16).to_le_bytes());
    let params = net.flatten_params();
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_matrix(out: &mut Vec<u8>, q: &NtnTransitionLayer) {
    out.push(GLOBAL_MATRIX);
    out.extend_from_slice(&(q.classes() as u16).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(q.logits().len() as u64).to_le_bytes());
    for v in q.logits() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model to checkpoint bytes.
pub fn save_model(model: &TrainedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    match model {
        TrainedModel::Unet(net) => {
            out.extend_from_slice(&1u16.to_le_bytes());
            push_net(&mut out, net);
        }
        TrainedModel::Ntn(m) => {
            out.extend_from_slice(&2u16.to_le_bytes());
            push_net(&mut out, &m.clean);
            push_matrix(&mut out, &m.q);
        }
        TrainedModel::Antn(m) => {
            out.extend_from_slice(&3u16.to_le_bytes());
            push_net(&mut out, &m.clean);
            push_net(&mut out, &m.trans1);
            push_net(&mut out, &m.trans2);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        if end > self.bytes.len() {
            return Err(CheckpointError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

enum Entry {
    Net(MiniUNet),
    Matrix(NtnTransitionLayer),
}

fn read_entry(r: &mut Reader<'_>, index: usize) -> Result<Entry, CheckpointError> {
    let head = r.u8()?;
    let classes = r.u16()? as usize;
    let filters = r.u16()? as usize;
    let in_channels = r.u16()? as usize;
    let declared = r.u64()?;
    let count = usize::try_from(declared)
        .map_err(|_| CheckpointError::ShapeMismatch(format!("{declared} parameters")))?;
    // Bound the read against the buffer before allocating anything.
    let raw = r.take(
        count
            .checked_mul(8)
            .ok_or_else(|| CheckpointError::ShapeMismatch(format!("{declared} parameters")))?,
    )?;
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if params.iter().any(|v| !v.is_finite()) {
        return Err(CheckpointError::NonFinite { entry: index });
    }
    if head == GLOBAL_MATRIX {
        if filters != 0 || in_channels != 0 {
            return Err(CheckpointError::ShapeMismatch(format!(
                "matrix entry {index} declares filters {filters} and input channels {in_channels}"
            )));
        }
        let q = NtnTransitionLayer::from_logits(classes, params).map_err(|e| {
            CheckpointError::ShapeMismatch(format!("matrix entry {index}: {e}"))
        })?;
        return Ok(Entry::Matrix(q));
    }
    let head = match head {
        0 => HeadKind::Clean,
        1 => HeadKind::TransitionRowSoftmax,
        2 => HeadKind::TransitionUniformRemainder,
        other => {
            return Err(CheckpointError::ShapeMismatch(format!(
                "entry {index} has unknown head code {other}"
            )))
        }
    };
    let spec = MiniUNetSpec { in_channels, base_filters: filters, num_classes: classes };
    spec.validate()
        .map_err(|e| CheckpointError::ShapeMismatch(format!("entry {index}: {e}")))?;
    // Checked before building the network so a descriptor promising more
    // parameters than the file carries cannot trigger a huge allocation.
    if params.len() != spec.param_count(head) {
        return Err(CheckpointError::ShapeMismatch(format!(
            "entry {index} carries {} parameters, its shape needs {}",
            params.len(),
            spec.param_count(head)
        )));
    }
    // Seed is irrelevant; every weight is overwritten below.
    let mut net = MiniUNet::init(spec, head, 0)
        .map_err(|e| CheckpointError::ShapeMismatch(format!("entry {index}: {e}")))?;
    net.load_flat_params(&params)
        .map_err(|e| CheckpointError::ShapeMismatch(format!("entry {index}: {e}")))?;
    Ok(Entry::Net(net))
}

/// Deserializes checkpoint bytes back into a model.
pub fn load_model(bytes: &[u8]) -> Result<TrainedModel, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u16()? as usize;
    let mut entries = Vec::with_capacity(count.min(16));
    for i in 0..count {
        entries.push(read_entry(&mut r, i)?);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingData(bytes.len() - r.pos));
    }
    let heads: Vec<&Entry> = entries.iter().collect();
    let describe = |e: &Entry| match e {
        Entry::Net(n) => head_code(n.head()),
        Entry::Matrix(_) => GLOBAL_MATRIX,
    };
    let codes: Vec<u8> = heads.iter().map(|e| describe(e)).collect();
    let mut it = entries.into_iter();
    let model = match codes.as_slice() {
        [0] => match it.next() {
            Some(Entry::Net(net)) => TrainedModel::Unet(net),
            _ => unreachable!("codes said a net"),
        },
        [0, 3] => {
            let (Some(Entry::Net(clean)), Some(Entry::Matrix(q))) = (it.next(), it.next()) else {
                unreachable!("codes said net then matrix")
            };
            if clean.spec().num_classes != q.classes() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "base net has {} classes, matrix has {}",
                    clean.spec().num_classes,
                    q.classes()
                )));
            }
            TrainedModel::Ntn(NtnModel { clean, q })
        }
        [0, 1, 1] | [0, 2, 2] => {
            let (Some(Entry::Net(clean)), Some(Entry::Net(trans1)), Some(Entry::Net(trans2))) =
                (it.next(), it.next(), it.next())
            else {
                unreachable!("codes said three nets")
            };
            let c = clean.spec().num_classes;
            if trans1.spec().num_classes != c || trans2.spec().num_classes != c {
                return Err(CheckpointError::ShapeMismatch(
                    "networks disagree on the class count".into(),
                ));
            }
            TrainedModel::Antn(AntnModel { clean, trans1, trans2 })
        }
        other => {
            return Err(CheckpointError::ShapeMismatch(format!(
                "unrecognized network combination {other:?}"
            )))
        }
    };
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &TrainedModel) -> Result<(), CheckpointError> {
    fs::write(path, save_model(model))
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
}

pub fn read_checkpoint(path: &Path) -> Result<TrainedModel, CheckpointError> {
    let bytes = fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    load_model(&bytes)
}
