//! Ring halo exchange overlapped with strong-scaled triad work.

use std::time::{Duration, Instant};

use apr_core::shim::Shim;
use apr_core::{Error, Result};

use crate::stats::median;
use crate::work::{Triad, DEFAULT_TRIAD_LEN};
use crate::{barrier, require_ranks, Mode};

const TO_RIGHT: i32 = 21;
const TO_LEFT: i32 = 22;

/// How a rank spends its work time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorkKind {
    /// Triad sweeps until the deadline.
    Compute,
    /// One triad sweep, then sleep until the deadline. For hosts with fewer
    /// cores than ranks, where spinning ranks would steal each other's time.
    Idle,
}

impl std::str::FromStr for WorkKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compute" => Ok(WorkKind::Compute),
            "idle" => Ok(WorkKind::Idle),
            _ => Err(Error::Usage(format!("unknown work kind {s:?} (compute or idle)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GhostParams {
    pub halo_bytes: usize,
    /// Work of the whole job per iteration; each rank does base_work / nprocs.
    pub base_work: Duration,
    pub iterations: usize,
    pub array_len: usize,
    pub seed: u64,
    pub work_kind: WorkKind,
}

impl Default for GhostParams {
    fn default() -> Self {
        GhostParams {
            halo_bytes: 1 << 20,
            base_work: Duration::from_millis(50),
            iterations: 20,
            array_len: DEFAULT_TRIAD_LEN,
            seed: 1,
            work_kind: WorkKind::Compute,
        }
    }
}

/// Per-rank medians over the timed iterations, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhostBreakdown {
    pub mode: Mode,
    pub rank: usize,
    pub nprocs: usize,
    pub halo_bytes: usize,
    pub t_w: f64,
    pub t_visible_comm: f64,
    pub t_total: f64,
}

pub fn run_ghostcell(shim: &Shim, p: &GhostParams) -> Result<GhostBreakdown> {
    require_ranks(shim, "ghost-cell benchmark", |n| n >= 2, "at least 2")?;
    if p.iterations == 0 {
        return Err(Error::Usage("ghost-cell benchmark needs at least one iteration".into()));
    }
    if p.halo_bytes <= shim.config().eager_threshold && shim.config().eager_threshold > 0 {
        log::warn!(
            "halo of {} bytes is within the eager threshold ({}); the progress thread is bypassed",
            p.halo_bytes,
            shim.config().eager_threshold
        );
    }
    let rt = shim.runtime();
    let world = shim.world();
    let sync = rt.dup(&world);
    let (n, me) = (shim.size(), shim.rank());
    let left = (me + n - 1) % n;
    let right = (me + 1) % n;
    let work = p.base_work / n as u32;
    let halo = vec![me as u8; p.halo_bytes];
    let mut triad = Triad::new(p.array_len, p.seed ^ me as u64);

    let (mut tw, mut tv, mut tt) = (Vec::new(), Vec::new(), Vec::new());
    barrier(rt, &sync)?;
    // iteration 0 is a warm-up
    for it in 0..=p.iterations {
        let t0 = Instant::now();
        let hs = [
            shim.irecv(p.halo_bytes, left, TO_RIGHT, &world)?,
            shim.irecv(p.halo_bytes, right, TO_LEFT, &world)?,
            shim.isend(halo.clone(), right, TO_RIGHT, &world)?,
            shim.isend(halo.clone(), left, TO_LEFT, &world)?,
        ];
        let w0 = Instant::now();
        match p.work_kind {
            WorkKind::Compute => {
                triad.run_until(w0 + work);
            }
            WorkKind::Idle => {
                triad.sweep();
                std::thread::sleep((w0 + work).saturating_duration_since(Instant::now()));
            }
        }
        let t_w = w0.elapsed().as_secs_f64();
        for st in shim.wait_all(&hs)? {
            if st.error != apr_core::StatusError::Ok {
                return Err(Error::Protocol { rank: me, reason: format!("halo exchange failed: {st:?}") });
            }
        }
        let t_total = t0.elapsed().as_secs_f64();
        if it > 0 {
            tw.push(t_w);
            tv.push(t_total - t_w);
            tt.push(t_total);
        }
    }
    barrier(rt, &sync)?;
    if !triad.verify() {
        return Err(Error::Protocol { rank: me, reason: "triad result mismatch".into() });
    }
    Ok(GhostBreakdown {
        mode: Mode::of(shim),
        rank: me,
        nprocs: n,
        halo_bytes: p.halo_bytes,
        t_w: median(&tw),
        t_visible_comm: median(&tv),
        t_total: median(&tt),
    })
}
