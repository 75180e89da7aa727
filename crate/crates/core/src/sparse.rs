//! Compressed-row storage for signed integer incidence matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sparse matrix with small signed integer entries, stored row-compressed.
///
/// Incidence matrices of cell complexes only hold -1, 0 and +1, but the
/// products formed while checking exactness or building coarse operators can
/// carry larger integers, so entries are `i64`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Triplets", try_from = "Triplets")]
pub struct IntCsr {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<i64>,
}

/// Coordinate form used for serialization: `(row, col, value)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplets {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, i64)>,
}

impl From<IntCsr> for Triplets {
    fn from(m: IntCsr) -> Self {
        m.to_triplets()
    }
}

impl TryFrom<Triplets> for IntCsr {
    type Error = Error;

    fn try_from(t: Triplets) -> Result<Self> {
        Self::from_triplet_set(&t)
    }
}

impl IntCsr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    /// Builds a matrix from triplets. Duplicates are summed and explicit zeros dropped.
    pub fn from_triplets(rows: usize, cols: usize, entries: &[(usize, usize, i64)]) -> Result<Self> {
        let mut sorted = entries.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::InvalidArgument(format!(
                    "triplet ({r}, {c}) outside a {rows}x{cols} matrix"
                )));
            }
        }
        sorted.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(sorted.len());
        let mut vals = Vec::with_capacity(sorted.len());
        let mut i = 0;
        while i < sorted.len() {
            let (r, c, mut v) = sorted[i];
            i += 1;
            while i < sorted.len() && sorted[i].0 == r && sorted[i].1 == c {
                v += sorted[i].2;
                i += 1;
            }
            if v != 0 {
                col_idx.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
            }
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            vals,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Nonzeros of row `r` as `(col, value)` pairs.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, i64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> i64 {
        self.row(r).find(|&(j, _)| j == c).map_or(0, |(_, v)| v)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, i64)> {
        (0..self.rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .collect()
    }

    pub fn to_triplets(&self) -> Triplets {
        Triplets {
            rows: self.rows,
            cols: self.cols,
            entries: self.triplets(),
        }
    }

    pub fn from_triplet_set(t: &Triplets) -> Result<Self> {
        Self::from_triplets(t.rows, t.cols, &t.entries)
    }

    pub fn transpose(&self) -> Self {
        let entries: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, &entries).expect("transpose of a valid matrix")
    }

    /// Exact integer product `self * other`.
    pub fn matmul(&self, other: &IntCsr) -> Result<IntCsr> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: self.cols,
                got: other.rows,
                context: "integer matrix product",
            });
        }
        let mut entries = Vec::new();
        let mut acc = vec![0i64; other.cols];
        let mut touched = Vec::new();
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if acc[c] == 0 {
                        touched.push(c);
                    }
                    acc[c] += a * b;
                }
            }
            for &c in &touched {
                if acc[c] != 0 {
                    entries.push((r, c, acc[c]));
                }
                acc[c] = 0;
            }
            touched.clear();
        }
        IntCsr::from_triplets(self.rows, other.cols, &entries)
    }

    pub fn max_abs(&self) -> i64 {
        self.vals.iter().map(|v| v.abs()).max().unwrap_or(0)
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, v)| v as f64 * x[c]).sum())
            .collect()
    }

    /// `y = Aᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (c, v) in self.row(r) {
                y[c] += v as f64 * xr;
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                m[(r, c)] = v as f64;
            }
        }
        m
    }

    /// Number of nonzeros in each column.
    pub fn col_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cols];
        for &c in &self.col_idx {
            counts[c] += 1;
        }
        counts
    }

    /// Replaces the value stored at `(r, c)`; the entry must already be present.
    pub fn set_existing(&mut self, r: usize, c: usize, v: i64) -> Result<()> {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        for idx in span {
            if self.col_idx[idx] == c {
                self.vals[idx] = v;
                return Ok(());
            }
        }
        Err(Error::InvalidArgument(format!("no stored entry at ({r}, {c})")))
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, keep: &[usize]) -> IntCsr {
        let entries: Vec<_> = keep
            .iter()
            .enumerate()
            .flat_map(|(new_r, &r)| self.row(r).map(move |(c, v)| (new_r, c, v)))
            .collect();
        IntCsr::from_triplets(keep.len(), self.cols, &entries).expect("row selection")
    }
}
