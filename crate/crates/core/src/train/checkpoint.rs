//! Model checkpoints: a binary tensor container plus a JSON sidecar.
//!
//! Container layout (little-endian): `"ALCK" | u32 version=1 | u32 count`,
//! then per tensor `u32 name_len | name | u64 rows | u64 cols | rows*cols f64`.
//! The sidecar lives next to it at `<path>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::model::{AlignmentModel, ModelKind, Projection};
use super::TrainConfig;

pub const MAGIC: [u8; 4] = *b"ALCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("bad sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub config_hash: String,
    pub lambda: f64,
    pub levels: usize,
    pub tau: f64,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn new(model: &AlignmentModel, cfg: &TrainConfig) -> Self {
        let (d1, d2, k) = model.dims();
        Self {
            kind: model.kind,
            d1,
            d2,
            k,
            config_hash: cfg.config_hash(),
            lambda: cfg.lambda,
            levels: cfg.reg.levels,
            tau: cfg.reg.tau,
            seed: cfg.seed,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode(model: &AlignmentModel) -> Vec<u8> {
    let named = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Malformed("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8")))
    }
}

pub fn decode(buf: &[u8], kind: ModelKind) -> Result<AlignmentModel, CheckpointError> {
    let mut r = Reader { buf, pos: 0 };
    if r.bytes(4)? != MAGIC {
        return Err(CheckpointError::Malformed("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Malformed(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors: Vec<(String, Array2<f64>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.bytes(len)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?
            .to_owned();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Malformed("shape overflow".into()))?;
        let raw = r.bytes(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("shape overflow".into()))?)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    let mut take = |name: &str| {
        tensors
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| tensors.swap_remove(i).1)
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name}")))
    };
    let mut side = |p: &str| -> Result<Projection, CheckpointError> {
        Ok(match kind {
            ModelKind::Linear => Projection::Linear {
                w: take(&format!("{p}.w"))?,
            },
            ModelKind::Mlp => Projection::Mlp {
                w1: take(&format!("{p}.w1"))?,
                b1: take(&format!("{p}.b1"))?,
                w2: take(&format!("{p}.w2"))?,
                b2: take(&format!("{p}.b2"))?,
            },
        })
    };
    let f1 = side("f1")?;
    let f2 = side("f2")?;
    Ok(AlignmentModel { kind, f1, f2 })
}

pub fn save(path: impl AsRef<Path>, model: &AlignmentModel, cfg: &TrainConfig) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    fs::write(path, encode(model)).map_err(io(path))?;
    let meta = CheckpointMeta::new(model, cfg);
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(&side, json).map_err(io(&side))
}

pub fn load(path: impl AsRef<Path>) -> Result<(AlignmentModel, CheckpointMeta), CheckpointError> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&side).map_err(io(&side))?)?;
    let buf = fs::read(path).map_err(io(path))?;
    let model = decode(&buf, meta.kind)?;
    if model.dims() != (meta.d1, meta.d2, meta.k) {
        return Err(CheckpointError::Malformed(format!(
            "tensor shapes {:?} disagree with sidecar ({}, {}, {})",
            model.dims(),
            meta.d1,
            meta.d2,
            meta.k
        )));
    }
    Ok((model, meta))
}
