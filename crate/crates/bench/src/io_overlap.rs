//! File-write variant of the overlap benchmark.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use apr_core::fileio::{file_open, FileMode};
use apr_core::shim::Shim;
use apr_core::{Error, Result, StatusError};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::OverlapSample;
use crate::work::busy_work;
use crate::{barrier, Mode};

#[derive(Debug, Clone)]
pub struct IoParams {
    pub path: PathBuf,
    /// Bytes written by each rank per repetition.
    pub volume: usize,
    pub sweep: Vec<Duration>,
    pub reps: usize,
    /// Bytes per second per file handle.
    pub throttle: Option<u64>,
    pub seed: u64,
}

/// The bytes rank `rank` writes.
pub fn rank_data(rank: usize, volume: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(rank as u64));
    let mut v = vec![0u8; volume];
    rng.fill_bytes(&mut v);
    v
}

/// Expected file contents: every rank's data at offset rank × volume.
pub fn expected_file(ranks: usize, volume: usize, seed: u64) -> Vec<u8> {
    (0..ranks).flat_map(|r| rank_data(r, volume, seed)).collect()
}

/// Each rank writes its region with a non-blocking write, works for t_w,
/// then waits. Every rank returns its own samples.
pub fn run_io_overlap(shim: &Shim, p: &IoParams) -> Result<Vec<OverlapSample>> {
    if p.reps == 0 {
        return Err(Error::Usage("I/O overlap benchmark needs at least one repetition".into()));
    }
    if p.throttle.is_none() {
        log::warn!("no I/O throttle set; timings reflect the local disk and page cache");
    }
    let rt = shim.runtime();
    let sync = rt.dup(&shim.world());
    let mode = Mode::of(shim);
    let me = shim.rank();
    let data = bytes::Bytes::from(rank_data(me, p.volume, p.seed));
    let file = file_open(&p.path, FileMode::ReadWrite, p.throttle)?;
    let offset = (me * p.volume) as u64;
    let mut out = Vec::new();
    for &t_w in &p.sweep {
        for rep in 0..p.reps {
            barrier(rt, &sync)?;
            let t0 = Instant::now();
            let h = shim.file_iwrite_at(&file, offset, data.clone())?;
            busy_work(t_w);
            let st = shim.wait(&h)?;
            let t_t = t0.elapsed().as_secs_f64();
            if st.error != StatusError::Ok || st.received_bytes != p.volume {
                return Err(Error::Protocol { rank: me, reason: format!("file write failed: {st:?}") });
            }
            out.push(OverlapSample { mode, v: p.volume, t_w: t_w.as_secs_f64(), t_t, rep });
        }
    }
    barrier(rt, &sync)?;
    Ok(out)
}
