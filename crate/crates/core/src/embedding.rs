//! Embedding interchange: loading, validating and grouping labelled feature
//! vectors produced by an external encoder.
//!
//! Two payload formats are supported:
//!
//! * **binary**: `b"CODA"`, a version byte, little-endian `u64` row count,
//!   little-endian `u32` dimension, then `N * D` little-endian `f32` values in
//!   row-major order.
//! * **csv**: one row per line, `D` numeric cells, no header.
//!
//! Sample identifiers and class labels always live in a JSON sidecar holding
//! one record per row (`{"row": 0, "sample_id": "...", "label": 1}`).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"CODA";
pub const FORMAT_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 8 + 4;

/// Class identifiers are 1-based.
pub type ClassId = u32;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("dimension mismatch at row {row}: expected {expected} values, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("missing labels: {0}")]
    MissingLabels(String),
    #[error("duplicate sample id {0:?}")]
    DuplicateSampleId(String),
    #[error("label 0 at row {0}; class ids start at 1")]
    InvalidLabel(usize),
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("unparseable cell at row {row}: {cell:?}")]
    Parse { row: usize, cell: String },
    #[error("unknown format {0:?} (expected binary or csv)")]
    UnknownFormat(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("sidecar json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Binary,
    Csv,
}

impl FromStr for Format {
    type Err = EmbeddingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" | "bin" => Ok(Format::Binary),
            "csv" => Ok(Format::Csv),
            other => Err(EmbeddingError::UnknownFormat(other.to_string())),
        }
    }
}

/// One sidecar record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowMeta {
    pub row: usize,
    pub sample_id: String,
    pub label: ClassId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    rows: Vec<RowMeta>,
}

/// A validated, immutable set of labelled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<f32>,
    sample_ids: Vec<String>,
    labels: Vec<ClassId>,
    dim: usize,
    class_index: BTreeMap<ClassId, Vec<usize>>,
}

impl EmbeddingSet {
    /// Validates and indexes the given rows.
    pub fn new(
        vectors: Vec<f32>,
        dim: usize,
        sample_ids: Vec<String>,
        labels: Vec<ClassId>,
    ) -> Result<Self, EmbeddingError> {
        let n = labels.len();
        if dim == 0 {
            return Err(EmbeddingError::MalformedHeader("dimension is zero".into()));
        }
        if vectors.len() != n * dim {
            return Err(EmbeddingError::DimensionMismatch {
                row: vectors.len() / dim,
                expected: n * dim,
                found: vectors.len(),
            });
        }
        if sample_ids.len() != n {
            return Err(EmbeddingError::MissingLabels(format!(
                "{} sample ids for {n} rows",
                sample_ids.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFiniteValue {
                row: pos / dim,
                col: pos % dim,
            });
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &sample_ids {
            if !seen.insert(id.as_str()) {
                return Err(EmbeddingError::DuplicateSampleId(id.clone()));
            }
        }
        let mut class_index: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (row, &label) in labels.iter().enumerate() {
            if label == 0 {
                return Err(EmbeddingError::InvalidLabel(row));
            }
            class_index.entry(label).or_default().push(row);
        }
        Ok(Self {
            vectors,
            sample_ids,
            labels,
            dim,
            class_index,
        })
    }

    /// Builds a set from f64 rows (convenience for generators and tests).
    pub fn from_matrix(
        m: &Matrix,
        sample_ids: Vec<String>,
        labels: Vec<ClassId>,
    ) -> Result<Self, EmbeddingError> {
        let vectors = m.as_slice().iter().map(|&v| v as f32).collect();
        Self::new(vectors, m.cols(), sample_ids, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.class_index.keys().copied()
    }

    pub fn class_index(&self) -> &BTreeMap<ClassId, Vec<usize>> {
        &self.class_index
    }

    /// All rows as an f64 matrix.
    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.len(),
            self.dim,
            self.vectors.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    /// The rows of one class, in row order.
    pub fn group_by_class(&self, class: ClassId) -> Result<ClassView<'_>, EmbeddingError> {
        let rows = self
            .class_index
            .get(&class)
            .ok_or(EmbeddingError::UnknownClass(class))?;
        Ok(ClassView {
            set: self,
            class,
            rows,
        })
    }

    /// Subset of rows (in the order given) as a new set.
    pub fn subset(&self, rows: &[usize]) -> Result<Self, EmbeddingError> {
        let mut vectors = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            vectors.extend_from_slice(self.row(r));
            ids.push(self.sample_ids[r].clone());
            labels.push(self.labels[r]);
        }
        Self::new(vectors, self.dim, ids, labels)
    }

    /// Same vectors and ids, different labels.
    pub fn relabel(&self, labels: Vec<ClassId>) -> Result<Self, EmbeddingError> {
        Self::new(self.vectors.clone(), self.dim, self.sample_ids.clone(), labels)
    }

    fn sidecar(&self) -> Sidecar {
        Sidecar {
            rows: self
                .sample_ids
                .iter()
                .zip(&self.labels)
                .enumerate()
                .map(|(row, (id, &label))| RowMeta {
                    row,
                    sample_id: id.clone(),
                    label,
                })
                .collect(),
        }
    }
}

/// Read-only view over a single class.
#[derive(Debug, Clone, Copy)]
pub struct ClassView<'a> {
    set: &'a EmbeddingSet,
    class: ClassId,
    rows: &'a [usize],
}

impl<'a> ClassView<'a> {
    pub fn class(&self) -> ClassId {
        self.class
    }

    /// Global row indices belonging to this class.
    pub fn rows(&self) -> &'a [usize] {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn set(&self) -> &'a EmbeddingSet {
        self.set
    }

    /// The class rows as an f64 matrix (local index `i` ↔ global `rows()[i]`).
    pub fn to_matrix(&self) -> Matrix {
        let dim = self.set.dim();
        let mut data = Vec::with_capacity(self.rows.len() * dim);
        for &r in self.rows {
            data.extend(self.set.row(r).iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(self.rows.len(), dim, data)
    }
}

/// Conventional sidecar path for a payload: `foo.coda` → `foo.labels.json`.
pub fn default_labels_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.labels.json"))
}

pub fn load_embeddings(
    path: &Path,
    format: Format,
    labels_path: &Path,
) -> Result<EmbeddingSet, EmbeddingError> {
    let (vectors, n, dim) = match format {
        Format::Binary => read_binary(&mut fs::File::open(path)?)?,
        Format::Csv => read_csv(path)?,
    };
    let meta = read_sidecar(labels_path, n)?;
    EmbeddingSet::new(
        vectors,
        dim,
        meta.iter().map(|m| m.sample_id.clone()).collect(),
        meta.iter().map(|m| m.label).collect(),
    )
}

pub fn save_embeddings(
    set: &EmbeddingSet,
    path: &Path,
    format: Format,
    labels_path: &Path,
) -> Result<(), EmbeddingError> {
    match format {
        Format::Binary => {
            let mut f = io::BufWriter::new(fs::File::create(path)?);
            write_binary(&mut f, set.vectors(), set.len(), set.dim())?;
            f.flush()?;
        }
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(path)?;
            for i in 0..set.len() {
                w.write_record(set.row(i).iter().map(|v| v.to_string()))?;
            }
            w.flush()?;
        }
    }
    let json = serde_json::to_string_pretty(&set.sidecar())?;
    fs::write(labels_path, json + "\n")?;
    Ok(())
}

pub fn write_binary<W: Write>(
    w: &mut W,
    vectors: &[f32],
    n: usize,
    dim: usize,
) -> Result<(), EmbeddingError> {
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for v in vectors {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Parses a binary payload, returning `(values, n, dim)`.
pub fn read_binary<R: Read>(r: &mut R) -> Result<(Vec<f32>, usize, usize), EmbeddingError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < HEADER_LEN {
        return Err(EmbeddingError::MalformedHeader(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            buf.len()
        )));
    }
    if &buf[..4] != MAGIC {
        return Err(EmbeddingError::MalformedHeader("bad magic".into()));
    }
    if buf[4] != FORMAT_VERSION {
        return Err(EmbeddingError::MalformedHeader(format!(
            "unsupported version {}",
            buf[4]
        )));
    }
    let n = u64::from_le_bytes(buf[5..13].try_into().expect("8 bytes")) as usize;
    let dim = u32::from_le_bytes(buf[13..17].try_into().expect("4 bytes")) as usize;
    if dim == 0 {
        return Err(EmbeddingError::MalformedHeader("dimension is zero".into()));
    }
    let payload = &buf[HEADER_LEN..];
    let expected = n
        .checked_mul(dim)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| EmbeddingError::MalformedHeader("row count overflows".into()))?;
    if payload.len() != expected {
        return Err(EmbeddingError::MalformedHeader(format!(
            "header declares {n} rows of dimension {dim} ({expected} bytes) but payload has {} bytes",
            payload.len()
        )));
    }
    let vectors = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((vectors, n, dim))
}

fn read_csv(path: &Path) -> Result<(Vec<f32>, usize, usize), EmbeddingError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut vectors = Vec::new();
    let mut dim = None;
    let mut n = 0;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let expected = *dim.get_or_insert(rec.len());
        if rec.len() != expected {
            return Err(EmbeddingError::DimensionMismatch {
                row,
                expected,
                found: rec.len(),
            });
        }
        for (col, cell) in rec.iter().enumerate() {
            let v: f32 = cell.parse().map_err(|_| EmbeddingError::Parse {
                row,
                cell: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(EmbeddingError::NonFiniteValue { row, col });
            }
            vectors.push(v);
        }
        n += 1;
    }
    let dim = dim.ok_or_else(|| EmbeddingError::MalformedHeader("empty csv".into()))?;
    Ok((vectors, n, dim))
}

fn read_sidecar(path: &Path, n: usize) -> Result<Vec<RowMeta>, EmbeddingError> {
    let text = fs::read_to_string(path).map_err(|e| {
        EmbeddingError::MissingLabels(format!("cannot read {}: {e}", path.display()))
    })?;
    let sidecar: Sidecar = serde_json::from_str(&text)?;
    let mut slots: Vec<Option<RowMeta>> = vec![None; n];
    for meta in sidecar.rows {
        let row = meta.row;
        let slot = slots.get_mut(row).ok_or_else(|| {
            EmbeddingError::MissingLabels(format!("sidecar row {row} is out of range (n = {n})"))
        })?;
        if slot.is_some() {
            return Err(EmbeddingError::MissingLabels(format!(
                "sidecar row {row} appears twice"
            )));
        }
        *slot = Some(meta);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(row, m)| {
            m.ok_or_else(|| EmbeddingError::MissingLabels(format!("no label for row {row}")))
        })
        .collect()
}
