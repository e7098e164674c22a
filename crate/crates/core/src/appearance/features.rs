//! Dense feature matrices and their on-disk form.
//!
//! Layout: 8-byte magic `PDFEAT\0\0`, then version, row count and dimension as
//! little-endian `u64`, then `rows * dim` little-endian `f32` values row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 8] = *b"PDFEAT\0\0";
pub const FEATURE_VERSION: u64 = 1;

/// Row-major matrix of `f32` features, one row per box.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 && !data.is_empty() {
            return Err(Error::validation("feature dimension is zero but data is not empty"));
        }
        if dim != 0 && !data.len().is_multiple_of(dim) {
            return Err(Error::validation(format!(
                "{} feature values do not divide into rows of {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("feature matrix"));
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows<R: AsRef<[f32]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(dim, data)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        (0..self.rows()).map(move |i| self.row(i))
    }

    pub fn push_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("feature row"));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(&FEATURE_MAGIC)?;
        out.write_all(&FEATURE_VERSION.to_le_bytes())?;
        out.write_all(&(self.rows() as u64).to_le_bytes())?;
        out.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(32 + 4 * self.data.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cursor = bytes;
        let mut magic = [0u8; 8];
        let mut word = [0u8; 8];
        let short = |_| Error::format(path, "feature file is truncated");
        cursor.read_exact(&mut magic).map_err(short)?;
        if magic != FEATURE_MAGIC {
            return Err(Error::format(path, "not a feature matrix (bad magic)"));
        }
        cursor.read_exact(&mut word).map_err(short)?;
        let version = u64::from_le_bytes(word);
        if version != FEATURE_VERSION {
            return Err(Error::Version {
                path: path.to_path_buf(),
                schema: "feature matrix".into(),
                found: version,
                expected: FEATURE_VERSION,
            });
        }
        cursor.read_exact(&mut word).map_err(short)?;
        let rows = u64::from_le_bytes(word) as usize;
        cursor.read_exact(&mut word).map_err(short)?;
        let dim = u64::from_le_bytes(word) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::format(path, "feature header overflows"))?;
        if cursor.len() != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} payload bytes for {rows}x{dim}, found {}", cursor.len()),
            ));
        }
        let data = cursor
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(dim, data).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[inline]
pub fn dot(w: &[f64], f: &[f32]) -> f64 {
    w.iter().zip(f).map(|(a, b)| a * *b as f64).sum()
}
