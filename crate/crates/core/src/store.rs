//! Embedding store: one modality's n×d embedding matrix plus per-row metadata.
//!
//! On disk a store is a small binary file (`EMB1` format, float32 little-endian,
//! row-major) and a JSON sidecar at `<path>.meta.json`. In memory the matrix is
//! held as `f64`; writing rounds every entry to the nearest `f32`, so a
//! write-read-write cycle is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;

/// Row norms of a normalized store must be within this distance of 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Other,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Other => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Modality::Image),
            1 => Ok(Modality::Text),
            2 => Ok(Modality::Other),
            c => Err(Error::InvalidStore(format!("unknown modality code {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Other => "other",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            "other" => Ok(Modality::Other),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Per-row labels: one class index per row, or a sorted index set per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Labels {
    Single(Vec<usize>),
    Multi(Vec<Vec<usize>>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::Multi(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi(_))
    }

    pub fn max_index(&self) -> Option<usize> {
        match self {
            Labels::Single(v) => v.iter().copied().max(),
            Labels::Multi(v) => v.iter().flatten().copied().max(),
        }
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Single(v) => Labels::Single(idx.iter().map(|&i| v[i]).collect()),
            Labels::Multi(v) => Labels::Multi(idx.iter().map(|&i| v[i].clone()).collect()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    #[serde(default)]
    pub ids: Option<Vec<String>>,
    #[serde(default)]
    pub labels: Option<Labels>,
    #[serde(default)]
    pub attributes: Option<BTreeMap<String, Vec<String>>>,
    #[serde(default)]
    pub class_names: Option<Vec<String>>,
    #[serde(default)]
    pub source: String,
}

impl StoreMeta {
    pub fn validate(&self, rows: usize) -> Result<()> {
        let check_len = |field: &str, len: usize| {
            if len != rows {
                Err(Error::MetaLengthMismatch {
                    field: field.to_string(),
                    len,
                    rows,
                })
            } else {
                Ok(())
            }
        };
        if let Some(ids) = &self.ids {
            check_len("ids", ids.len())?;
        }
        if let Some(labels) = &self.labels {
            check_len("labels", labels.len())?;
            if let Labels::Multi(sets) = labels {
                for (row, set) in sets.iter().enumerate() {
                    if set.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::InvalidStore(format!(
                            "multi-label set at row {row} is not sorted and unique"
                        )));
                    }
                }
            }
            if let (Some(names), Some(max)) = (&self.class_names, labels.max_index()) {
                if max >= names.len() {
                    return Err(Error::InvalidStore(format!(
                        "label index {max} out of range for {} class names",
                        names.len()
                    )));
                }
            }
        }
        if let Some(attrs) = &self.attributes {
            for (family, values) in attrs {
                check_len(&format!("attributes.{family}"), values.len())?;
                if let Some(row) = values.iter().position(|v| v.is_empty()) {
                    return Err(Error::InvalidStore(format!(
                        "empty attribute value for family {family:?} at row {row}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Metadata restricted to rows `idx`.
    pub fn select(&self, idx: &[usize]) -> StoreMeta {
        StoreMeta {
            ids: self
                .ids
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i].clone()).collect()),
            labels: self.labels.as_ref().map(|l| l.select(idx)),
            attributes: self.attributes.as_ref().map(|a| {
                a.iter()
                    .map(|(k, v)| (k.clone(), idx.iter().map(|&i| v[i].clone()).collect()))
                    .collect()
            }),
            class_names: self.class_names.clone(),
            source: self.source.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    matrix: DMatrix<f64>,
    modality: Modality,
    normalized: bool,
    meta: StoreMeta,
}

impl EmbeddingStore {
    pub fn new(
        matrix: DMatrix<f64>,
        modality: Modality,
        normalized: bool,
        meta: StoreMeta,
    ) -> Result<Self> {
        let store = EmbeddingStore {
            matrix,
            modality,
            normalized,
            meta,
        };
        store.validate()?;
        Ok(store)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.matrix.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidStore(format!(
                "matrix must be non-empty, got {n}x{d}"
            )));
        }
        for row in 0..n {
            for col in 0..d {
                if !self.matrix[(row, col)].is_finite() {
                    return Err(Error::NonFinite { row, col });
                }
            }
        }
        if self.normalized {
            for (row, r) in self.matrix.row_iter().enumerate() {
                let norm = r.norm();
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::InvalidStore(format!(
                        "store flagged normalized but row {row} has norm {norm}"
                    )));
                }
            }
        }
        self.meta.validate(n)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn meta(&self) -> &StoreMeta {
        &self.meta
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.meta.labels.as_ref()
    }

    pub fn into_parts(self) -> (DMatrix<f64>, Modality, bool, StoreMeta) {
        (self.matrix, self.modality, self.normalized, self.meta)
    }

    /// Store with rows `idx` (in order).
    pub fn select_rows(&self, idx: &[usize]) -> Result<EmbeddingStore> {
        let matrix = self.matrix.select_rows(idx.iter());
        EmbeddingStore::new(
            matrix,
            self.modality,
            self.normalized,
            self.meta.select(idx),
        )
    }
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Serializes the binary part of a store.
pub fn encode_store(store: &EmbeddingStore) -> Vec<u8> {
    let (n, d) = store.matrix.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + n * d * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(store.modality.code());
    buf.push(u8::from(store.normalized));
    buf.push(0);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for row in store.matrix.row_iter() {
        for &v in row.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

/// Parses the binary part of a store; metadata is attached separately.
pub fn decode_store(bytes: &[u8], meta: StoreMeta) -> Result<EmbeddingStore> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        for (dst, src) in found.iter_mut().zip(bytes.iter()) {
            *dst = *src;
        }
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::SizeMismatch {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let modality = Modality::from_code(bytes[5])?;
    let normalized = match bytes[6] {
        0 => false,
        1 => true,
        f => return Err(Error::InvalidStore(format!("bad normalized flag {f}"))),
    };
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let expected = (n as u64) * (d as u64) * 4;
    let actual = (bytes.len() - HEADER_LEN) as u64;
    if expected != actual {
        return Err(Error::SizeMismatch { expected, actual });
    }
    let data = &bytes[HEADER_LEN..];
    let mut values = Vec::with_capacity(n * d);
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: k / d,
                col: k % d,
            });
        }
        values.push(f64::from(v));
    }
    let matrix = DMatrix::from_row_slice(n, d, &values);
    EmbeddingStore::new(matrix, modality, normalized, meta)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Pretty JSON with a trailing newline, written atomically.
pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    store.validate()?;
    let bytes = encode_store(store);
    let meta = serde_json::to_vec_pretty(&store.meta).map_err(|e| Error::json("store meta", e))?;
    write_atomic(path, &bytes)?;
    write_atomic(&meta_path(path), &meta)
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sidecar = meta_path(path);
    let meta = if sidecar.exists() {
        let text = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::json(sidecar.display().to_string(), e))?
    } else {
        StoreMeta::default()
    };
    decode_store(&bytes, meta)
}

/// Scales every row to unit ℓ2 norm.
pub fn l2_normalize(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = matrix.clone();
    for (i, mut row) in out.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroRow(i));
        }
        row /= norm;
    }
    Ok(out)
}
