//! Feature matrices and the `IPFF` binary container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! offset  size     field
//! 0       4        magic "IPFF"
//! 4       4        version (u32) = 1
//! 8       4        flags (u32), bit 0 = labels present
//! 12      8        N (u64)
//! 20      8        d (u64)
//! 28      4*N*d    f32 values, row-major
//! ..      4*N      i32 labels (only when flag bit 0 is set)
//! ..      8        FNV-1a 64 checksum of every preceding byte
//! ```
//!
//! Values are stored as f32 and widened to f64 on load.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"IPFF";
pub const VERSION: u32 = 1;
pub const FLAG_LABELS: u32 = 1;
pub const HEADER_LEN: usize = 28;
pub const CHECKSUM_LEN: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}, expected \"IPFF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("truncated file: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(u64),
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("empty feature matrix")]
    Empty,
    #[error("ragged CSV: line {line} has {found} fields, expected {expected}")]
    Ragged { line: usize, expected: usize, found: usize },
    #[error("non-numeric CSV cell {value:?} at line {line}")]
    NonNumeric { line: usize, value: String },
    #[error("csv: {0}")]
    Csv(String),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub labels: Option<Vec<i32>>,
    pub source_tag: String,
}

impl FeatureMatrix {
    pub fn new(data: Array2<f64>, labels: Option<Vec<i32>>, source_tag: impl Into<String>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(FormatError::Empty.into());
        }
        if let Some(labels) = &labels {
            if labels.len() != data.nrows() {
                return Err(Error::DimensionMismatch { expected: data.nrows(), got: labels.len() });
            }
        }
        check_finite(&data)?;
        Ok(Self { data, labels, source_tag: source_tag.into() })
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Serialized `IPFF` bytes.
    pub fn to_ipff_bytes(&self) -> Vec<u8> {
        let (n, d) = self.data.dim();
        let label_len = if self.labels.is_some() { 4 * n } else { 0 };
        let mut buf = Vec::with_capacity(HEADER_LEN + 4 * n * d + label_len + CHECKSUM_LEN);
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.labels.is_some() { FLAG_LABELS } else { 0 };
        buf.extend_from_slice(&flags.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(d as u64).to_le_bytes());
        for &v in self.data.iter() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for &l in labels {
                buf.extend_from_slice(&l.to_le_bytes());
            }
        }
        let sum = fnv1a64(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    pub fn from_ipff_bytes(bytes: &[u8], source_tag: impl Into<String>) -> std::result::Result<Self, FormatError> {
        let found = bytes.len() as u64;
        if bytes.len() < 4 {
            return Err(FormatError::Truncated { expected: (HEADER_LEN + CHECKSUM_LEN) as u64, found });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(FormatError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(FormatError::Truncated { expected: (HEADER_LEN + CHECKSUM_LEN) as u64, found });
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let has_labels = u32_at(8) & FLAG_LABELS != 0;
        let (n, d) = (u64_at(12), u64_at(20));
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|v| v.checked_add(if has_labels { n.checked_mul(4)? } else { 0 }))
            .and_then(|v| v.checked_add((HEADER_LEN + CHECKSUM_LEN) as u64))
            .unwrap_or(u64::MAX);
        if found < expected {
            return Err(FormatError::Truncated { expected, found });
        }
        if found > expected {
            return Err(FormatError::TrailingBytes(found - expected));
        }
        let body_end = bytes.len() - CHECKSUM_LEN;
        let stored = u64_at(body_end);
        let computed = fnv1a64(&bytes[..body_end]);
        if stored != computed {
            return Err(FormatError::ChecksumMismatch { stored, computed });
        }
        if n == 0 || d == 0 {
            return Err(FormatError::Empty);
        }
        let (n, d) = (n as usize, d as usize);
        let values_end = HEADER_LEN + 4 * n * d;
        let values: Vec<f64> = bytes[HEADER_LEN..values_end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFiniteValue { row: i / d, col: i % d });
        }
        let labels = has_labels.then(|| {
            bytes[values_end..body_end]
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        });
        let data = Array2::from_shape_vec((n, d), values).expect("length checked above");
        Ok(Self { data, labels, source_tag: source_tag.into() })
    }
}

fn check_finite(data: &Array2<f64>) -> std::result::Result<(), FormatError> {
    let d = data.ncols();
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(FormatError::NonFiniteValue { row: i / d, col: i % d }),
        None => Ok(()),
    }
}

pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, m.to_ipff_bytes())?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    Ok(FeatureMatrix::from_ipff_bytes(&bytes, path.display().to_string())?)
}

/// Reads a numeric CSV with a header row. A final column named `label`
/// becomes the label vector; every other column is a feature.
pub fn read_csv_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| FormatError::Csv(e.to_string()))?;
    let headers = reader.headers().map_err(|e| FormatError::Csv(e.to_string()))?.clone();
    let width = headers.len();
    let has_labels = headers.iter().next_back().is_some_and(|h| h.eq_ignore_ascii_case("label"));
    let d = if has_labels { width - 1 } else { width };
    if d == 0 {
        return Err(FormatError::Empty.into());
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| FormatError::Csv(e.to_string()))?;
        let line = i + 2;
        if record.len() != width {
            return Err(FormatError::Ragged { line, expected: width, found: record.len() }.into());
        }
        for cell in record.iter().take(d) {
            let v: f64 = cell
                .parse()
                .map_err(|_| FormatError::NonNumeric { line, value: cell.to_string() })?;
            values.push(v);
        }
        if has_labels {
            let cell = &record[d];
            let l = cell
                .parse::<i32>()
                .or_else(|_| cell.parse::<f64>().map(|f| f as i32))
                .map_err(|_| FormatError::NonNumeric { line, value: cell.to_string() })?;
            labels.push(l);
        }
    }
    let n = values.len() / d;
    if n == 0 {
        return Err(FormatError::Empty.into());
    }
    let data = Array2::from_shape_vec((n, d), values).expect("rows checked to be rectangular");
    FeatureMatrix::new(data, has_labels.then_some(labels), path.display().to_string())
}

/// Reads `IPFF` unless the extension is `.csv`.
pub fn read_any(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_csv_features(path),
        _ => read_features(path),
    }
}
