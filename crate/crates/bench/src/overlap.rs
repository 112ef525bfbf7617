//! Two-rank overlap benchmark: start a transfer, compute for t_w, then wait.

use std::time::{Duration, Instant};

use apr_core::shim::Shim;
use apr_core::{Error, Result};

use crate::model::OverlapSample;
use crate::work::busy_work;
use crate::{barrier, require_ranks, Mode};

const TAG: i32 = 11;

/// Which side is non-blocking. Rank 0 always does the timed
/// start / work / wait sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    /// Rank 0 isend, rank 1 blocking receive.
    #[default]
    IsendRecv,
    /// Rank 0 irecv, rank 1 blocking send.
    IrecvSend,
    /// Rank 0 isend, rank 1 irecv + the same work + wait.
    IsendIrecv,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isend-recv" => Ok(Variant::IsendRecv),
            "irecv-send" => Ok(Variant::IrecvSend),
            "isend-irecv" => Ok(Variant::IsendIrecv),
            other => Err(Error::Usage(format!("unknown overlap variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OverlapParams {
    pub v: usize,
    pub sweep: Vec<Duration>,
    pub reps: usize,
    pub variant: Variant,
}

/// Runs every t_w of the sweep `reps` times. Rank 0 returns the samples,
/// rank 1 an empty list.
pub fn run_overlap(shim: &Shim, p: &OverlapParams) -> Result<Vec<OverlapSample>> {
    require_ranks(shim, "overlap benchmark", |n| n == 2, "exactly 2")?;
    if p.reps == 0 {
        return Err(Error::Usage("overlap benchmark needs at least one repetition".into()));
    }
    let rt = shim.runtime();
    let world = shim.world();
    let sync = rt.dup(&world);
    let mode = Mode::of(shim);
    let payload = vec![0x5au8; p.v];
    let me = shim.rank();
    let mut out = Vec::new();

    for &t_w in &p.sweep {
        for rep in 0..p.reps {
            barrier(rt, &sync)?;
            if me == 0 {
                let t0 = Instant::now();
                let h = match p.variant {
                    Variant::IsendRecv | Variant::IsendIrecv => shim.isend(payload.clone(), 1, TAG, &world)?,
                    Variant::IrecvSend => shim.irecv(p.v, 1usize, TAG, &world)?,
                };
                busy_work(t_w);
                shim.wait(&h)?;
                let t_t = t0.elapsed().as_secs_f64();
                out.push(OverlapSample { mode, v: p.v, t_w: t_w.as_secs_f64(), t_t, rep });
            } else {
                match p.variant {
                    Variant::IsendRecv => {
                        let h = shim.irecv(p.v, 0usize, TAG, &world)?;
                        shim.wait(&h)?;
                    }
                    Variant::IrecvSend => {
                        let h = shim.isend(payload.clone(), 0, TAG, &world)?;
                        shim.wait(&h)?;
                    }
                    Variant::IsendIrecv => {
                        let h = shim.irecv(p.v, 0usize, TAG, &world)?;
                        busy_work(t_w);
                        shim.wait(&h)?;
                    }
                }
            }
        }
    }
    barrier(rt, &sync)?;
    Ok(out)
}
