//! Versioned binary container for distance, Gram and feature matrices, plus
//! CSV and PGM exports.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    "WSKN"
//! version  u32
//! rows     u32
//! cols     u32
//! epsilon  f64
//! sigma    f64        (0 for raw distances)
//! kind     u8
//! payload  f64[rows * cols], row-major
//! sections { tag [u8; 4], length u64, bytes[length] }*
//! ```
//!
//! Sections are optional. `EIGN` holds an eigenpair block (`ℓ` as u32, then
//! `λ` as f64[ℓ], then `v` as f64[N·ℓ] column by column), `MODL` holds a
//! serialized classifier, and `KEY ` a 32-byte content key used to verify
//! caches.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"WSKN";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8 + 8 + 1;

pub const SECTION_EIGENPAIRS: [u8; 4] = *b"EIGN";
pub const SECTION_MODEL: [u8; 4] = *b"MODL";
pub const SECTION_KEY: [u8; 4] = *b"KEY ";

/// What the payload matrix holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    /// Pairwise squared Wasserstein distances.
    WassersteinDistances,
    WassersteinGram,
    ReweightedGram,
    RbfGram,
    /// Pairwise squared Euclidean distances between raw intensity vectors.
    EuclideanDistances,
    /// Training features with an `EIGN` section.
    FeatureMap,
    /// One-vs-one ensemble with a `MODL` section.
    Model,
}

impl PayloadKind {
    pub fn tag(self) -> u8 {
        match self {
            PayloadKind::WassersteinDistances => 0,
            PayloadKind::WassersteinGram => 1,
            PayloadKind::ReweightedGram => 2,
            PayloadKind::RbfGram => 3,
            PayloadKind::EuclideanDistances => 4,
            PayloadKind::FeatureMap => 5,
            PayloadKind::Model => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => PayloadKind::WassersteinDistances,
            1 => PayloadKind::WassersteinGram,
            2 => PayloadKind::ReweightedGram,
            3 => PayloadKind::RbfGram,
            4 => PayloadKind::EuclideanDistances,
            5 => PayloadKind::FeatureMap,
            6 => PayloadKind::Model,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: PayloadKind,
    pub epsilon: f64,
    pub sigma: f64,
    pub matrix: DMatrix<f64>,
    pub sections: Vec<([u8; 4], Vec<u8>)>,
}

impl Container {
    pub fn new(kind: PayloadKind, epsilon: f64, sigma: f64, matrix: DMatrix<f64>) -> Self {
        Container {
            kind,
            epsilon,
            sigma,
            matrix,
            sections: Vec::new(),
        }
    }

    pub fn with_section(mut self, tag: [u8; 4], bytes: Vec<u8>) -> Self {
        self.sections.push((tag, bytes));
        self
    }

    pub fn section(&self, tag: [u8; 4]) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, b)| b.as_slice())
    }

    pub fn key(&self) -> Option<&[u8]> {
        self.section(SECTION_KEY)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (rows, cols) = self.matrix.shape();
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        out.extend_from_slice(&(cols as u32).to_le_bytes());
        out.extend_from_slice(&self.epsilon.to_le_bytes());
        out.extend_from_slice(&self.sigma.to_le_bytes());
        out.push(self.kind.tag());
        for i in 0..rows {
            for j in 0..cols {
                out.extend_from_slice(&self.matrix[(i, j)].to_le_bytes());
            }
        }
        for (tag, bytes) in &self.sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error("magic", 0, "not a WSKN container"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(r.error("version", 4, &format!("unsupported version {version}")));
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let epsilon = r.f64("epsilon")?;
        let sigma = r.f64("sigma")?;
        let offset = r.offset;
        let tag = r.take(1, "kind")?[0];
        let kind = PayloadKind::from_tag(tag)
            .ok_or_else(|| r.error("kind", offset, &format!("unknown kind tag {tag}")))?;
        let payload = r.take(8 * rows * cols, "payload")?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let matrix = DMatrix::from_row_slice(rows, cols, &values);
        let mut sections = Vec::new();
        while !r.is_done() {
            let tag: [u8; 4] = r.take(4, "section tag")?.try_into().expect("4 bytes");
            let len = r.u64("section length")? as usize;
            sections.push((tag, r.take(len, "section body")?.to_vec()));
        }
        Ok(Container {
            kind,
            epsilon,
            sigma,
            matrix,
            sections,
        })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Cursor over a byte buffer producing parse errors with offsets.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    path: &'a Path,
    pub(crate) offset: u64,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        ByteReader {
            bytes,
            path,
            offset: 0,
        }
    }

    pub(crate) fn error(&self, field: &'static str, offset: u64, message: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            field,
            offset,
            message: message.to_string(),
        }
    }

    pub(crate) fn is_done(&self) -> bool {
        self.offset as usize >= self.bytes.len()
    }

    pub(crate) fn take(&mut self, len: usize, field: &'static str) -> Result<&'a [u8]> {
        let start = self.offset as usize;
        let end = start
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error(field, self.offset, "truncated"))?;
        self.offset = end as u64;
        Ok(&self.bytes[start..end])
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        Ok(self
            .take(8 * n, field)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Appends little-endian values to a section buffer.
#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    pub(crate) bytes: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn u32(&mut self, x: u32) {
        self.bytes.extend_from_slice(&x.to_le_bytes());
    }

    pub(crate) fn f64(&mut self, x: f64) {
        self.bytes.extend_from_slice(&x.to_le_bytes());
    }

    pub(crate) fn f64s(&mut self, xs: &[f64]) {
        for &x in xs {
            self.f64(x);
        }
    }
}

/// Writes a matrix as headerless CSV, one row per line, shortest
/// round-trip formatting.
pub fn write_matrix_csv(matrix: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..matrix.nrows() {
        let row: Vec<String> = (0..matrix.ncols()).map(|j| matrix[(i, j)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Linear map of `[min, max]` onto `[0, 255]`, row-major. A constant matrix
/// maps to zeros.
pub fn heatmap_bytes(matrix: &DMatrix<f64>) -> Vec<u8> {
    let (lo, hi) = matrix
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = hi - lo;
    let mut out = Vec::with_capacity(matrix.len());
    for i in 0..matrix.nrows() {
        for j in 0..matrix.ncols() {
            let t = if span > 0.0 { (matrix[(i, j)] - lo) / span } else { 0.0 };
            out.push((t * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Binary PGM (`P5`) heatmap of a matrix.
pub fn write_pgm(matrix: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    write!(out, "P5\n{} {}\n255\n", matrix.ncols(), matrix.nrows()).expect("write to Vec");
    out.extend_from_slice(&heatmap_bytes(matrix));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
