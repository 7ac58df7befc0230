//! Sparse system matrices and the `SVDDIPMAT1` text format.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autograd::LinearMap;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Nonnegative sparse matrix in compressed-row form, built from unique triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    weights: Vec<f64>,
}

impl SparseMatrix {
    /// Validates and sorts `(row, col, weight)` triplets.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        mut triplets: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("empty matrix shape {rows}x{cols}")));
        }
        if cols > u32::MAX as usize {
            return Err(Error::invalid("column count exceeds u32"));
        }
        for &(r, c, w) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!(
                    "entry ({r},{c}) outside {rows}x{cols} matrix"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(format!("entry ({r},{c}) has weight {w}")));
            }
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        if let Some(w) = triplets
            .windows(2)
            .find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1))
        {
            return Err(Error::invalid(format!("duplicate entry ({},{})", w[0].0, w[0].1)));
        }
        let mut row_ptr = vec![0usize; rows + 1];
        for &(r, _, _) in &triplets {
            row_ptr[r + 1] += 1;
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx: triplets.iter().map(|&(_, c, _)| c as u32).collect(),
            weights: triplets.iter().map(|&(_, _, w)| w).collect(),
        })
    }

    pub fn identity(n: usize) -> Result<Self> {
        Self::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0)).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            (self.row_ptr[r]..self.row_ptr[r + 1])
                .map(move |k| (r, self.col_idx[k] as usize, self.weights[k]))
        })
    }

    pub fn matvec<T: Real>(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        Ok(self.forward(x))
    }

    pub fn matvec_transpose<T: Real>(&self, y: &[T]) -> Result<Vec<T>> {
        if y.len() != self.rows {
            return Err(Error::invalid(format!(
                "matrix has {} rows, vector has {} entries",
                self.rows,
                y.len()
            )));
        }
        Ok(self.adjoint(y))
    }

    fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|r| {
                let span = self.row_ptr[r]..self.row_ptr[r + 1];
                self.col_idx[span.clone()]
                    .iter()
                    .zip(&self.weights[span])
                    .map(|(&c, &w)| T::from_f64(w) * x[c as usize])
                    .sum()
            })
            .collect()
    }

    fn adjoint<T: Real>(&self, y: &[T]) -> Vec<T> {
        let mut out = vec![T::ZERO; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            for (&c, &w) in self.col_idx[span.clone()].iter().zip(&self.weights[span]) {
                out[c as usize] += T::from_f64(w) * yr;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("SVDDIPMAT1 {} {} {}\n", self.rows, self.cols, self.nnz());
        for (r, c, w) in self.triplets() {
            let _ = writeln!(s, "{r} {c} {w:e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::format("matrix file", detail);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let ["SVDDIPMAT1", rows, cols, nnz] = fields.as_slice() else {
            return Err(bad(format!("bad header line {header:?}")));
        };
        let parse = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| bad(format!("bad {what} {s:?}")))
        };
        let (rows, cols, nnz) = (parse(rows, "rows")?, parse(cols, "cols")?, parse(nnz, "nnz")?);
        let mut triplets = Vec::with_capacity(nnz);
        for (lineno, line) in lines.enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [r, c, w] = f.as_slice() else {
                return Err(bad(format!("entry {}: expected 'row col weight'", lineno + 1)));
            };
            let w: f64 = w
                .parse()
                .map_err(|_| bad(format!("entry {}: bad weight {w:?}", lineno + 1)))?;
            triplets.push((parse(r, "row")?, parse(c, "col")?, w));
        }
        if triplets.len() != nnz {
            return Err(bad(format!("header declares {nnz} entries, found {}", triplets.len())));
        }
        Self::from_triplets(rows, cols, triplets).map_err(|e| bad(e.to_string()))
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

impl<T: Real> LinearMap<T> for SparseMatrix {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.cols]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.rows]
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        self.forward(x)
    }

    fn apply_adjoint(&self, y: &[T]) -> Vec<T> {
        self.adjoint(y)
    }
}
