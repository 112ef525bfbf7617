//! Distributed sparse matrix-vector multiply with local / non-local phases.

use std::collections::BTreeSet;
use std::ops::Range;
use std::time::Instant;

use apr_core::shim::{Handle, Shim};
use apr_core::{Error, Result, StatusError};

use crate::csr::CsrMatrix;
use crate::partition::RowPartition;
use crate::{barrier, bytes_to_f64s, f64s_to_bytes};

const HALO_TAG: i32 = 31;
const GATHER_TAG: i32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpmvMode {
    /// Non-blocking exchange overlapped with the local phase, no progress thread.
    Vector,
    /// Same, with the progress thread enabled.
    VectorShim,
    /// One thread does blocking communication while the others compute.
    Task,
}

impl SpmvMode {
    pub const ALL: [SpmvMode; 3] = [SpmvMode::Vector, SpmvMode::VectorShim, SpmvMode::Task];

    pub fn name(self) -> &'static str {
        match self {
            SpmvMode::Vector => "VECTOR",
            SpmvMode::VectorShim => "VECTOR_SHIM",
            SpmvMode::Task => "TASK",
        }
    }
}

impl std::str::FromStr for SpmvMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "vector" => Ok(SpmvMode::Vector),
            "vector-shim" => Ok(SpmvMode::VectorShim),
            "task" => Ok(SpmvMode::Task),
            other => Err(Error::Usage(format!("unknown spmvm mode {other:?}"))),
        }
    }
}

/// Columns of `block` owned by other ranks, ascending.
pub fn required_remote_columns(block: &CsrMatrix, part: &RowPartition, rank: usize) -> BTreeSet<usize> {
    let own = part.block(rank);
    block.col_idx.iter().copied().filter(|c| !own.contains(c)).collect()
}

/// Splits this rank's row block into the part that multiplies owned vector
/// entries (columns relative to the block start) and the part that needs
/// received entries (columns are receive-buffer slots). Also returns the
/// global column held by each receive slot.
pub fn spmv_phase_split(block: &CsrMatrix, part: &RowPartition, rank: usize) -> (CsrMatrix, CsrMatrix, Vec<usize>) {
    let own = part.block(rank);
    let recv_cols: Vec<usize> = required_remote_columns(block, part, rank).into_iter().collect();
    let mut local = (vec![0usize], Vec::new(), Vec::new());
    let mut remote = (vec![0usize], Vec::new(), Vec::new());
    for r in 0..block.n_rows {
        for (c, v) in block.row(r) {
            if own.contains(&c) {
                local.1.push(c - own.start);
                local.2.push(v);
            } else {
                let slot = recv_cols.binary_search(&c).expect("remote column has a slot");
                remote.1.push(slot);
                remote.2.push(v);
            }
        }
        local.0.push(local.1.len());
        remote.0.push(remote.1.len());
    }
    let n = block.n_rows;
    let local = CsrMatrix { n_rows: n, n_cols: own.len(), row_ptr: local.0, col_idx: local.1, values: local.2 };
    let remote = CsrMatrix { n_rows: n, n_cols: recv_cols.len(), row_ptr: remote.0, col_idx: remote.1, values: remote.2 };
    (local, remote, recv_cols)
}

/// Everything one rank needs for repeated multiplies.
#[derive(Debug, Clone)]
pub struct LocalProblem {
    pub rank: usize,
    pub rows: Range<usize>,
    pub local: CsrMatrix,
    pub nonlocal: CsrMatrix,
    /// Global column of each receive-buffer slot, ascending.
    pub recv_cols: Vec<usize>,
    /// (peer, receive slots) in peer order.
    pub recv_from: Vec<(usize, Range<usize>)>,
    /// (peer, indices into the owned vector part) in peer order.
    pub send_to: Vec<(usize, Vec<usize>)>,
}

impl LocalProblem {
    /// Builds rank `rank`'s problem from the full matrix, which every rank
    /// can generate or read identically.
    pub fn new(m: &CsrMatrix, part: &RowPartition, rank: usize) -> LocalProblem {
        let rows = part.block(rank);
        let block = m.row_block(rows.start, rows.end);
        let (local, nonlocal, recv_cols) = spmv_phase_split(&block, part, rank);

        let mut recv_from: Vec<(usize, Range<usize>)> = Vec::new();
        for (slot, &c) in recv_cols.iter().enumerate() {
            let owner = part.owner(c);
            match recv_from.last_mut() {
                Some((p, range)) if *p == owner => range.end = slot + 1,
                _ => recv_from.push((owner, slot..slot + 1)),
            }
        }

        let mut send_to = Vec::new();
        for peer in 0..part.parts() {
            if peer == rank {
                continue;
            }
            let pr = part.block(peer);
            let needed = required_remote_columns(&m.row_block(pr.start, pr.end), part, peer);
            let mine: Vec<usize> = needed.range(rows.clone()).map(|c| c - rows.start).collect();
            if !mine.is_empty() {
                send_to.push((peer, mine));
            }
        }
        LocalProblem { rank, rows, local, nonlocal, recv_cols, recv_from, send_to }
    }

    /// The row block rebuilt from both phases, with global columns.
    pub fn reassemble(&self) -> CsrMatrix {
        let mut entries = Vec::new();
        for r in 0..self.local.n_rows {
            entries.extend(self.local.row(r).map(|(c, v)| (r, c + self.rows.start, v)));
            entries.extend(self.nonlocal.row(r).map(|(c, v)| (r, self.recv_cols[c], v)));
        }
        let n_cols = self.rows.end.max(self.recv_cols.last().map_or(0, |c| c + 1));
        let mut m = CsrMatrix::from_triplets(self.local.n_rows, n_cols, entries).expect("entries in range");
        m.n_cols = n_cols;
        m
    }

    pub fn recv_len(&self) -> usize {
        self.recv_cols.len()
    }
}

#[derive(Debug, Clone)]
pub struct SpmvParams {
    pub mode: SpmvMode,
    pub threads: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct SpmvOutcome {
    pub seconds_per_multiply: f64,
    /// This rank's rows of y after `iterations` updates y += A x from y = 0.
    pub y: Vec<f64>,
}

/// Rows of `y` split into `threads` chunks, multiplied concurrently.
fn parallel_rows(m: &CsrMatrix, x: &[f64], y: &mut [f64], threads: usize) {
    let threads = threads.max(1).min(y.len().max(1));
    if threads == 1 {
        m.spmv_add(x, y);
        return;
    }
    let chunk = y.len().div_ceil(threads);
    std::thread::scope(|s| {
        let mut chunks = y.chunks_mut(chunk).enumerate();
        let (_, first) = chunks.next().expect("at least one chunk");
        for (i, part) in chunks {
            s.spawn(move || m.spmv_add_rows(i * chunk, x, part));
        }
        m.spmv_add_rows(0, x, first);
    });
}

fn post_exchange(shim: &Shim, prob: &LocalProblem, x_local: &[f64]) -> Result<(Vec<Handle>, Vec<Handle>)> {
    let world = shim.world();
    // Sends first: a rank's request-to-send then always precedes its
    // clear-to-send on the link, so no peer starts a long rendezvous write
    // before it has answered the opposite transfer.
    let mut sends = Vec::with_capacity(prob.send_to.len());
    for (peer, idx) in &prob.send_to {
        let vals: Vec<f64> = idx.iter().map(|&i| x_local[i]).collect();
        sends.push(shim.isend(f64s_to_bytes(&vals), *peer, HALO_TAG, &world)?);
    }
    let mut recvs = Vec::with_capacity(prob.recv_from.len());
    for (peer, slots) in &prob.recv_from {
        recvs.push(shim.irecv(slots.len() * 8, *peer, HALO_TAG, &world)?);
    }
    Ok((recvs, sends))
}

fn complete_exchange(shim: &Shim, prob: &LocalProblem, recvs: &[Handle], sends: &[Handle], buf: &mut [f64]) -> Result<()> {
    for ((_, slots), h) in prob.recv_from.iter().zip(recvs) {
        let st = shim.wait(h)?;
        if st.error != StatusError::Ok || st.received_bytes != slots.len() * 8 {
            return Err(Error::Protocol { rank: prob.rank, reason: format!("halo receive failed: {st:?}") });
        }
        let data = h.take_data().unwrap_or_default();
        buf[slots.clone()].copy_from_slice(&bytes_to_f64s(&data));
    }
    shim.wait_all(sends)?;
    Ok(())
}

/// Runs `iterations` multiplies y += A x. All ranks call this together.
pub fn run_spmvm(shim: &Shim, prob: &LocalProblem, x_local: &[f64], p: &SpmvParams) -> Result<SpmvOutcome> {
    match p.mode {
        SpmvMode::Vector if shim.is_enabled() => {
            return Err(Error::Usage("VECTOR mode runs without the progress thread".into()))
        }
        SpmvMode::VectorShim if !shim.is_enabled() => {
            return Err(Error::Usage("VECTOR_SHIM mode needs the progress thread".into()))
        }
        SpmvMode::Task if p.threads < 2 => {
            return Err(Error::Usage("TASK mode needs at least 2 threads (one communicates)".into()))
        }
        _ => {}
    }
    if x_local.len() != prob.rows.len() {
        return Err(Error::Usage(format!("x has {} entries for {} owned rows", x_local.len(), prob.rows.len())));
    }
    let rt = shim.runtime();
    let sync = rt.dup(&shim.world());
    let mut y = vec![0.0; prob.rows.len()];
    let mut buf = vec![0.0; prob.recv_len()];
    barrier(rt, &sync)?;
    let t0 = Instant::now();
    for _ in 0..p.iterations {
        match p.mode {
            SpmvMode::Vector | SpmvMode::VectorShim => {
                let (recvs, sends) = post_exchange(shim, prob, x_local)?;
                parallel_rows(&prob.local, x_local, &mut y, p.threads);
                complete_exchange(shim, prob, &recvs, &sends, &mut buf)?;
            }
            SpmvMode::Task => {
                let buf_ref = &mut buf;
                let y_ref = &mut y;
                std::thread::scope(|s| -> Result<()> {
                    let comm = s.spawn(move || -> Result<()> {
                        let (recvs, sends) = post_exchange(shim, prob, x_local)?;
                        complete_exchange(shim, prob, &recvs, &sends, buf_ref)
                    });
                    parallel_rows(&prob.local, x_local, y_ref, p.threads - 1);
                    comm.join().map_err(|_| Error::Protocol { rank: prob.rank, reason: "communication thread panicked".into() })?
                })?;
            }
        }
        parallel_rows(&prob.nonlocal, &buf, &mut y, p.threads);
    }
    let elapsed = t0.elapsed().as_secs_f64();
    barrier(rt, &sync)?;
    Ok(SpmvOutcome { seconds_per_multiply: elapsed / p.iterations.max(1) as f64, y })
}

/// Collects every rank's part on rank 0, in rank order.
pub fn gather_to_root(shim: &Shim, part: &[f64]) -> Result<Option<Vec<f64>>> {
    let rt = shim.runtime();
    let comm = rt.dup(&shim.world());
    if shim.rank() != 0 {
        rt.send(f64s_to_bytes(part), 0, GATHER_TAG, &comm)?;
        return Ok(None);
    }
    let mut all = part.to_vec();
    for r in 1..shim.size() {
        let probe = rt.irecv(usize::MAX / 2, r, GATHER_TAG, &comm)?;
        rt.wait(&probe)?;
        all.extend(bytes_to_f64s(&probe.take_data().unwrap_or_default()));
    }
    Ok(Some(all))
}

/// ||a - b|| / ||b||, or ||a|| when b is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// Deterministic right-hand side.
pub fn rhs(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Serial oracle: y after `iterations` updates y += A x from zero.
pub fn serial_reference(m: &CsrMatrix, x: &[f64], iterations: usize) -> Vec<f64> {
    let mut y = vec![0.0; m.n_rows];
    for _ in 0..iterations {
        m.spmv_add(x, &mut y);
    }
    y
}
