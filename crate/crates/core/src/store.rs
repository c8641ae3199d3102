//! Embedding storage: the EMB1 binary format, paired datasets, layer banks,
//! and the deterministic split / mix helpers used by the experiments.
//!
//! EMB1 layout (all integers little-endian):
//!
//! ```text
//! "EMB1" | u32 version=1 | u8 dtype (0=f32, 1=f64) | 3 zero bytes
//! u64 N | u64 d | N*d values, row-major
//! u64 id-table byte length | N x (u32 len, UTF-8 bytes)
//! ```
//!
//! The id-table trailer may be absent (file ends after the payload) or have
//! byte length zero; both mean "no ids".

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const EMB1_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB1_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 3 + 8 + 8;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported dtype tag {0}")]
    DtypeUnsupported(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("non-finite value at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("malformed id table: {0}")]
    MalformedIdTable(String),
    #[error("matrix must have at least one row and one column (got {rows}x{cols})")]
    EmptyMatrix { rows: usize, cols: usize },
    #[error("row count mismatch: {0} vs {1}")]
    RowCountMismatch(usize, usize),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("count {count} out of range for dataset of {n} rows")]
    CountOutOfRange { count: usize, n: usize },
    #[error("dimension mismatch: {what} {left} vs {right}")]
    DimensionMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("id mismatch: {0}")]
    IdMismatch(String),
    #[error("layer indices must be strictly increasing ({prev} then {next})")]
    NonIncreasingLayers { prev: usize, next: usize },
    #[error("bad manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, StoreError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Storage dtype of an embedding file. Values are always held as f64 in
/// memory; the tag records what the file contained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(StoreError::DtypeUnsupported(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        })
    }
}

/// Dense N x d matrix of encoder outputs with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Array2<f64>,
    dtype: Dtype,
}

impl EmbeddingMatrix {
    pub fn new(data: Array2<f64>, dtype: Dtype) -> Result<Self> {
        let (rows, cols) = data.dim();
        if rows == 0 || cols == 0 {
            return Err(StoreError::EmptyMatrix { rows, cols });
        }
        if let Some(((row, col), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(StoreError::NonFiniteValue { row, col });
        }
        Ok(Self { data, dtype })
    }

    /// f64-tagged matrix from an array.
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        Self::new(data, Dtype::F64)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(StoreError::MalformedHeader("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let data = Array2::from_shape_vec((n, d), flat)
            .map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
        Self::from_array(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        Self::new(self.data.select(Axis(0), idx), self.dtype)
    }
}

/// Matrix plus the optional id table stored next to it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub matrix: EmbeddingMatrix,
    pub ids: Option<Vec<String>>,
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Option<&'a [u8]> {
    let end = pos.checked_add(n)?;
    let s = buf.get(*pos..end)?;
    *pos = end;
    Some(s)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

/// Decode an EMB1 byte buffer.
pub fn decode_emb1(buf: &[u8]) -> Result<EmbeddingFile> {
    if buf.len() < HEADER_LEN {
        return Err(StoreError::MalformedHeader(format!(
            "file is {} bytes, header needs {HEADER_LEN}",
            buf.len()
        )));
    }
    if buf[0..4] != EMB1_MAGIC {
        return Err(StoreError::MalformedHeader(format!(
            "bad magic {:02x?}",
            &buf[0..4]
        )));
    }
    let version = le_u32(&buf[4..8]);
    if version != EMB1_VERSION {
        return Err(StoreError::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let dtype = Dtype::from_tag(buf[8])?;
    if buf[9..12] != [0, 0, 0] {
        return Err(StoreError::MalformedHeader(
            "reserved bytes must be zero".into(),
        ));
    }
    let n = le_u64(&buf[12..20]);
    let d = le_u64(&buf[20..28]);
    if n == 0 || d == 0 {
        return Err(StoreError::MalformedHeader(format!(
            "N and d must be >= 1 (got N={n}, d={d})"
        )));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(dtype.size() as u64))
        .ok_or_else(|| StoreError::MalformedHeader("N*d overflows".into()))?;
    let available = (buf.len() - HEADER_LEN) as u64;
    if available < expected {
        return Err(StoreError::TruncatedPayload {
            expected,
            found: available,
        });
    }
    let (n, d) = (n as usize, d as usize);
    let payload = &buf[HEADER_LEN..HEADER_LEN + expected as usize];
    let values: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let data = Array2::from_shape_vec((n, d), values)
        .map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
    let matrix = EmbeddingMatrix::new(data, dtype)?;

    let mut pos = HEADER_LEN + expected as usize;
    let ids = if pos == buf.len() {
        None
    } else {
        let table_len = take(buf, &mut pos, 8)
            .map(le_u64)
            .ok_or_else(|| StoreError::MalformedIdTable("truncated length field".into()))?;
        if table_len == 0 {
            None
        } else {
            let table = usize::try_from(table_len)
                .ok()
                .and_then(|len| take(buf, &mut pos, len))
                .ok_or_else(|| {
                    StoreError::MalformedIdTable(format!("declared {table_len} bytes, file too short"))
                })?;
            Some(decode_id_table(table, n)?)
        }
    };
    if pos != buf.len() {
        return Err(StoreError::MalformedIdTable(format!(
            "{} trailing bytes",
            buf.len() - pos
        )));
    }
    Ok(EmbeddingFile { matrix, ids })
}

fn decode_id_table(table: &[u8], n: usize) -> Result<Vec<String>> {
    let mut pos = 0;
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let len = take(table, &mut pos, 4)
            .map(le_u32)
            .ok_or_else(|| StoreError::MalformedIdTable(format!("missing length of id {i}")))?;
        let bytes = take(table, &mut pos, len as usize)
            .ok_or_else(|| StoreError::MalformedIdTable(format!("id {i} truncated")))?;
        let s = std::str::from_utf8(bytes)
            .map_err(|e| StoreError::MalformedIdTable(format!("id {i}: {e}")))?;
        ids.push(s.to_owned());
    }
    if pos != table.len() {
        return Err(StoreError::MalformedIdTable(
            "id table longer than N entries".into(),
        ));
    }
    Ok(ids)
}

/// Encode a matrix (narrowing to f32 when tagged f32) and optional ids.
pub fn encode_emb1(matrix: &EmbeddingMatrix, ids: Option<&[String]>) -> Result<Vec<u8>> {
    if let Some(ids) = ids {
        if ids.len() != matrix.rows() {
            return Err(StoreError::RowCountMismatch(matrix.rows(), ids.len()));
        }
    }
    let (n, d) = matrix.data.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + n * d * matrix.dtype.size() + 8);
    out.extend_from_slice(&EMB1_MAGIC);
    out.extend_from_slice(&EMB1_VERSION.to_le_bytes());
    out.push(matrix.dtype.tag());
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for &v in matrix.data.iter() {
        match matrix.dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let mut table = Vec::new();
    for id in ids.unwrap_or(&[]) {
        table.extend_from_slice(&(id.len() as u32).to_le_bytes());
        table.extend_from_slice(id.as_bytes());
    }
    out.extend_from_slice(&(table.len() as u64).to_le_bytes());
    out.extend_from_slice(&table);
    Ok(out)
}

pub fn load_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingFile> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(io_err(path))?;
    decode_emb1(&buf)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    load_embedding_file(path).map(|f| f.matrix)
}

pub fn save_embeddings(
    path: impl AsRef<Path>,
    matrix: &EmbeddingMatrix,
    ids: Option<&[String]>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_emb1(matrix, ids)?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Two row-aligned modalities plus their sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    a: EmbeddingMatrix,
    b: EmbeddingMatrix,
    ids: Vec<String>,
}

fn check_unique(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(StoreError::DuplicateId(id.clone()));
        }
    }
    Ok(())
}

pub fn compose_paired(
    a: EmbeddingMatrix,
    b: EmbeddingMatrix,
    ids: Vec<String>,
) -> Result<PairedDataset> {
    if a.rows() != b.rows() {
        return Err(StoreError::RowCountMismatch(a.rows(), b.rows()));
    }
    if ids.len() != a.rows() {
        return Err(StoreError::RowCountMismatch(a.rows(), ids.len()));
    }
    check_unique(&ids)?;
    Ok(PairedDataset { a, b, ids })
}

impl PairedDataset {
    /// Dataset with ids "0", "1", ...
    pub fn with_index_ids(a: EmbeddingMatrix, b: EmbeddingMatrix) -> Result<Self> {
        let ids = (0..a.rows()).map(|i| i.to_string()).collect();
        compose_paired(a, b, ids)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn a(&self) -> &EmbeddingMatrix {
        &self.a
    }

    pub fn b(&self) -> &EmbeddingMatrix {
        &self.b
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.cols(), self.b.cols())
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            a: self.a.select_rows(idx)?,
            b: self.b.select_rows(idx)?,
            ids: idx.iter().map(|&i| self.ids[i].clone()).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSize {
    Fraction(f64),
    Count(usize),
}

/// Deterministic train / held-out partition request.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub size: SplitSize,
    pub shuffle: bool,
}

impl SplitSpec {
    pub fn count(seed: u64, train_count: usize) -> Self {
        Self {
            seed,
            size: SplitSize::Count(train_count),
            shuffle: true,
        }
    }

    fn train_count(&self, n: usize) -> usize {
        match self.size {
            SplitSize::Count(c) => c,
            SplitSize::Fraction(f) if f.is_finite() && f > 0.0 => (f * n as f64).round() as usize,
            SplitSize::Fraction(_) => 0,
        }
    }
}

/// Seeded permutation of `0..n` (Fisher-Yates).
pub fn permutation(n: usize, seed: u64, purpose: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, purpose));
    idx
}

/// Partition into (train, held_out) with `1 <= train < N`.
pub fn subsample(ds: &PairedDataset, spec: &SplitSpec) -> Result<(PairedDataset, PairedDataset)> {
    let n = ds.len();
    let count = spec.train_count(n);
    if count == 0 || count >= n {
        return Err(StoreError::CountOutOfRange { count, n });
    }
    let order = if spec.shuffle {
        permutation(n, spec.seed, "subsample")
    } else {
        (0..n).collect()
    };
    let (train, held) = order.split_at(count);
    Ok((ds.select(train)?, ds.select(held)?))
}

/// Concatenate `extra` after `base`. Colliding ids in `extra` get a
/// `#mix<n>` suffix with the smallest free `n`.
pub fn mix(base: &PairedDataset, extra: &PairedDataset) -> Result<PairedDataset> {
    let (ba, bb) = base.dims();
    let (ea, eb) = extra.dims();
    if ba != ea {
        return Err(StoreError::DimensionMismatch {
            what: "modality a",
            left: ba,
            right: ea,
        });
    }
    if bb != eb {
        return Err(StoreError::DimensionMismatch {
            what: "modality b",
            left: bb,
            right: eb,
        });
    }
    let mut taken: HashSet<String> = base.ids.iter().cloned().collect();
    let mut ids = base.ids.clone();
    for id in &extra.ids {
        let mut candidate = id.clone();
        let mut n = 1;
        while taken.contains(&candidate) {
            candidate = format!("{id}#mix{n}");
            n += 1;
        }
        taken.insert(candidate.clone());
        ids.push(candidate);
    }
    let stack = |x: &EmbeddingMatrix, y: &EmbeddingMatrix| {
        let data = concatenate(Axis(0), &[x.data.view(), y.data.view()])
            .map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
        EmbeddingMatrix::new(data, x.dtype)
    };
    compose_paired(stack(&base.a, &extra.a)?, stack(&base.b, &extra.b)?, ids)
}

/// Per-layer embeddings of one encoder over a fixed sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBank {
    layers: Vec<(usize, EmbeddingMatrix)>,
    sample_ids: Vec<String>,
}

impl LayerBank {
    pub fn new(layers: Vec<(usize, EmbeddingMatrix)>, sample_ids: Vec<String>) -> Result<Self> {
        check_unique(&sample_ids)?;
        for pair in layers.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(StoreError::NonIncreasingLayers {
                    prev: pair[0].0,
                    next: pair[1].0,
                });
            }
        }
        if let Some((_, m)) = layers.iter().find(|(_, m)| m.rows() != sample_ids.len()) {
            return Err(StoreError::RowCountMismatch(sample_ids.len(), m.rows()));
        }
        Ok(Self { layers, sample_ids })
    }

    pub fn layers(&self) -> &[(usize, EmbeddingMatrix)] {
        &self.layers
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, index: usize) -> Option<&EmbeddingMatrix> {
        self.layers.iter().find(|(l, _)| *l == index).map(|(_, m)| m)
    }

    /// Keep only layers with `lo <= index <= hi`.
    pub fn window(&self, lo: usize, hi: usize) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .filter(|(l, _)| (lo..=hi).contains(l))
                .cloned()
                .collect(),
            sample_ids: self.sample_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestLayer {
    pub layer: usize,
    pub path: String,
}

/// JSON manifest describing a layer bank. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub layers: Vec<ManifestLayer>,
    pub sample_ids_path: String,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Newline-separated ids; blank lines are ignored.
pub fn read_id_list(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn write_id_list(path: impl AsRef<Path>, ids: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut text = ids.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn load_layer_bank(manifest_path: impl AsRef<Path>) -> Result<LayerBank> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let sample_ids = read_id_list(resolve(base, &manifest.sample_ids_path))?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let file = load_embedding_file(resolve(base, &entry.path))?;
        if let Some(ids) = &file.ids {
            if *ids != sample_ids {
                return Err(StoreError::IdMismatch(format!(
                    "layer {} ids differ from {}",
                    entry.layer, manifest.sample_ids_path
                )));
            }
        }
        layers.push((entry.layer, file.matrix));
    }
    LayerBank::new(layers, sample_ids)
}

/// Build a paired dataset from two EMB1 files. Ids come from the first file
/// that carries them; if both do they must agree. Without ids, row indices
/// are used.
pub fn load_paired(path_a: impl AsRef<Path>, path_b: impl AsRef<Path>) -> Result<PairedDataset> {
    let fa = load_embedding_file(path_a)?;
    let fb = load_embedding_file(path_b)?;
    let ids = match (fa.ids, fb.ids) {
        (Some(x), Some(y)) if x != y => {
            return Err(StoreError::IdMismatch(
                "modality files carry different ids".into(),
            ))
        }
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => (0..fa.matrix.rows()).map(|i| i.to_string()).collect(),
    };
    compose_paired(fa.matrix, fb.matrix, ids)
}
