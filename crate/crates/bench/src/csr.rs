//! Compressed sparse row matrices, generators and Matrix Market I/O.

use std::io::{BufRead, Write};

use apr_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn new(n_rows: usize, n_cols: usize, row_ptr: Vec<usize>, col_idx: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let m = CsrMatrix { n_rows, n_cols, row_ptr, col_idx, values };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Usage(format!("invalid CSR matrix: {msg}")));
        if self.row_ptr.len() != self.n_rows + 1 {
            return bad(format!("row_ptr has {} entries for {} rows", self.row_ptr.len(), self.n_rows));
        }
        if self.row_ptr[0] != 0 {
            return bad("row_ptr[0] != 0".into());
        }
        if self.row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_ptr decreases".into());
        }
        let nnz = self.row_ptr[self.n_rows];
        if self.col_idx.len() != nnz || self.values.len() != nnz {
            return bad(format!("nnz {nnz} but {} columns / {} values", self.col_idx.len(), self.values.len()));
        }
        if let Some(c) = self.col_idx.iter().find(|&&c| c >= self.n_cols) {
            return bad(format!("column {c} out of range {}", self.n_cols));
        }
        Ok(())
    }

    /// Builds from (row, col, value) entries; duplicates are summed and
    /// columns sorted within each row.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0; n_rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if r >= n_rows || c >= n_cols {
                return Err(Error::Usage(format!("entry ({r}, {c}) outside {n_rows}x{n_cols}")));
            }
            if last == Some((r, c)) {
                *values.last_mut().expect("previous entry") += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for i in 0..n_rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix::new(n_rows, n_cols, row_ptr, col_idx, values)
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix { n_rows: n, n_cols: n, row_ptr: (0..=n).collect(), col_idx: (0..n).collect(), values: vec![1.0; n] }
    }

    /// Square matrix with `nnz_per_row` distinct random columns per row
    /// (diagonal included).
    pub fn random(n: usize, nnz_per_row: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = nnz_per_row.clamp(1, n.max(1));
        let mut entries = Vec::with_capacity(n * k);
        for r in 0..n {
            let mut cols = vec![r];
            while cols.len() < k {
                let c = rng.gen_range(0..n);
                if !cols.contains(&c) {
                    cols.push(c);
                }
            }
            entries.extend(cols.into_iter().map(|c| (r, c, rng.gen_range(-1.0..1.0))));
        }
        CsrMatrix::from_triplets(n, n, entries).expect("generated entries are in range")
    }

    /// Square matrix whose entries lie within `half_bandwidth` of the
    /// diagonal: the diagonal plus `nnz_per_row - 1` random in-band columns.
    pub fn banded(n: usize, half_bandwidth: usize, nnz_per_row: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::with_capacity(n * nnz_per_row);
        for r in 0..n {
            let lo = r.saturating_sub(half_bandwidth);
            let hi = (r + half_bandwidth).min(n.saturating_sub(1));
            let width = hi - lo + 1;
            let k = nnz_per_row.clamp(1, width);
            let mut cols = vec![r];
            while cols.len() < k {
                let c = rng.gen_range(lo..=hi);
                if !cols.contains(&c) {
                    cols.push(c);
                }
            }
            entries.extend(cols.into_iter().map(|c| (r, c, rng.gen_range(-1.0..1.0))));
        }
        CsrMatrix::from_triplets(n, n, entries).expect("generated entries are in range")
    }

    pub fn nnz(&self) -> usize {
        self.row_ptr[self.n_rows]
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    /// y += A x.
    pub fn spmv_add(&self, x: &[f64], y: &mut [f64]) {
        self.spmv_add_rows(0, x, y);
    }

    /// y[i] += (A x)[first + i] for the rows covered by `y`.
    pub fn spmv_add_rows(&self, first: usize, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            let r = first + i;
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi += acc;
        }
    }

    /// Rows `start..end` as a matrix with the same columns.
    pub fn row_block(&self, start: usize, end: usize) -> CsrMatrix {
        let base = self.row_ptr[start];
        CsrMatrix {
            n_rows: end - start,
            n_cols: self.n_cols,
            row_ptr: self.row_ptr[start..=end].iter().map(|p| p - base).collect(),
            col_idx: self.col_idx[base..self.row_ptr[end]].to_vec(),
            values: self.values[base..self.row_ptr[end]].to_vec(),
        }
    }

    /// Reads the coordinate format (real, integer or pattern; general or
    /// symmetric).
    pub fn read_matrix_market(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| mm_err("empty input"))??;
        let h: Vec<String> = header.split_whitespace().map(str::to_lowercase).collect();
        if h.len() < 5 || h[0] != "%%matrixmarket" || h[1] != "matrix" || h[2] != "coordinate" {
            return Err(mm_err(&format!("unsupported header {header:?}")));
        }
        let pattern = match h[3].as_str() {
            "real" | "integer" | "double" => false,
            "pattern" => true,
            other => return Err(mm_err(&format!("unsupported field {other:?}"))),
        };
        let symmetric = match h[4].as_str() {
            "general" => false,
            "symmetric" => true,
            other => return Err(mm_err(&format!("unsupported symmetry {other:?}"))),
        };
        let mut size: Option<(usize, usize, usize)> = None;
        let mut entries = Vec::new();
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('%') {
                continue;
            }
            let f: Vec<&str> = t.split_whitespace().collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| mm_err(&format!("bad integer {s:?}")));
            match size {
                None => {
                    if f.len() != 3 {
                        return Err(mm_err(&format!("bad size line {t:?}")));
                    }
                    size = Some((num(f[0])?, num(f[1])?, num(f[2])?));
                    entries.reserve(num(f[2])?);
                }
                Some((rows, cols, _)) => {
                    if f.len() < if pattern { 2 } else { 3 } {
                        return Err(mm_err(&format!("bad entry line {t:?}")));
                    }
                    let (r, c) = (num(f[0])?, num(f[1])?);
                    if r == 0 || c == 0 || r > rows || c > cols {
                        return Err(mm_err(&format!("entry ({r}, {c}) outside {rows}x{cols}")));
                    }
                    let v = if pattern {
                        1.0
                    } else {
                        f[2].parse::<f64>().map_err(|_| mm_err(&format!("bad value {:?}", f[2])))?
                    };
                    entries.push((r - 1, c - 1, v));
                    if symmetric && r != c {
                        entries.push((c - 1, r - 1, v));
                    }
                }
            }
        }
        let (rows, cols, declared) = size.ok_or_else(|| mm_err("missing size line"))?;
        let stored = if symmetric { entries.iter().filter(|e| e.0 >= e.1).count() } else { entries.len() };
        if stored != declared {
            return Err(mm_err(&format!("header declares {declared} entries, found {stored}")));
        }
        CsrMatrix::from_triplets(rows, cols, entries)
    }

    pub fn write_matrix_market(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(out, "{} {} {}", self.n_rows, self.n_cols, self.nnz())?;
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                writeln!(out, "{} {} {:e}", r + 1, c + 1, v)?;
            }
        }
        Ok(())
    }
}

fn mm_err(msg: &str) -> Error {
    Error::Usage(format!("Matrix Market: {msg}"))
}
