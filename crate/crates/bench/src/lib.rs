//! Benchmarks reproducing the overlap experiments on top of `apr-core`, plus
//! the job launcher used by the `apr` binary.

pub mod csr;
pub mod ghostcell;
pub mod io_overlap;
pub mod launcher;
pub mod model;
pub mod output;
pub mod overlap;
pub mod partition;
pub mod pingpong;
pub mod spmv;
pub mod stats;
pub mod work;

use std::fmt;

use apr_core::shim::{Shim, ShimConfig};
use apr_core::{Communicator, Error, Result, Runtime};

/// Whether the progress thread is active for a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    ShimOff,
    ShimOn,
}

impl Mode {
    pub const BOTH: [Mode; 2] = [Mode::ShimOff, Mode::ShimOn];

    /// `base` with the enable flag set for this mode.
    pub fn config(self, base: &ShimConfig) -> ShimConfig {
        ShimConfig { enabled: self == Mode::ShimOn, ..base.clone() }
    }

    pub fn of(shim: &Shim) -> Mode {
        if shim.is_enabled() {
            Mode::ShimOn
        } else {
            Mode::ShimOff
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::ShimOff => "SHIM_OFF",
            Mode::ShimOn => "SHIM_ON",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SHIM_OFF" | "off" => Ok(Mode::ShimOff),
            "SHIM_ON" | "on" => Ok(Mode::ShimOn),
            other => Err(Error::Usage(format!("unknown mode {other:?}"))),
        }
    }
}

const BARRIER_TAG: i32 = 0x7fff_0000;

/// Dissemination barrier with empty messages. Use a communicator reserved
/// for it so it never matches benchmark traffic.
pub fn barrier(rt: &Runtime, comm: &Communicator) -> Result<()> {
    let n = comm.size();
    let me = comm.rank();
    let mut dist = 1;
    while dist < n {
        let to = (me + dist) % n;
        let from = (me + n - dist) % n;
        let r = rt.irecv(0, from, BARRIER_TAG, comm)?;
        let s = rt.isend(Vec::new(), to, BARRIER_TAG, comm)?;
        rt.wait(&s)?;
        rt.wait(&r)?;
        dist *= 2;
    }
    Ok(())
}

pub(crate) fn require_ranks(shim: &Shim, what: &str, ok: impl Fn(usize) -> bool, need: &str) -> Result<()> {
    let n = shim.size();
    if ok(n) {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} needs {need} ranks, job has {n}")))
    }
}

pub(crate) fn f64s_to_bytes(xs: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub(crate) fn bytes_to_f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
}
