use std::ops::Range;

use apr_core::{Error, Result};

use crate::csr::CsrMatrix;

/// Contiguous row blocks, one per process.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPartition {
    /// `parts + 1` increasing offsets from 0 to n_rows.
    pub cuts: Vec<usize>,
}

impl RowPartition {
    pub fn parts(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn block(&self, p: usize) -> Range<usize> {
        self.cuts[p]..self.cuts[p + 1]
    }

    /// Process owning row (or vector entry) `row`.
    pub fn owner(&self, row: usize) -> usize {
        self.cuts.partition_point(|&c| c <= row) - 1
    }

    pub fn block_nnz(&self, m: &CsrMatrix) -> Vec<usize> {
        (0..self.parts()).map(|p| m.row_ptr[self.cuts[p + 1]] - m.row_ptr[self.cuts[p]]).collect()
    }
}

/// Greedy prefix split: cut k goes at the first row boundary where the
/// cumulative nonzero count reaches k/parts of the total. Every block keeps
/// at least one row.
pub fn partition_rows_by_nnz(m: &CsrMatrix, parts: usize) -> Result<RowPartition> {
    let n = m.n_rows;
    if n == 0 || m.nnz() == 0 {
        return Err(Error::Usage("cannot partition an empty matrix".into()));
    }
    if parts == 0 || parts > n {
        return Err(Error::Usage(format!("cannot split {n} rows into {parts} parts")));
    }
    let total = m.nnz() as u128;
    let mut cuts = Vec::with_capacity(parts + 1);
    cuts.push(0);
    for k in 1..parts {
        // first boundary i with row_ptr[i] * parts >= k * total
        let target = k as u128 * total;
        let first = m.row_ptr.partition_point(|&c| (c as u128) * (parts as u128) < target);
        let prev = *cuts.last().expect("cuts start with 0");
        cuts.push(first.max(prev + 1).min(n - (parts - k)));
    }
    cuts.push(n);
    Ok(RowPartition { cuts })
}
