use std::time::Instant;

use apr_core::shim::Shim;
use apr_core::{Error, Result};

use crate::model::OverlapModel;
use crate::stats::median;
use crate::{barrier, require_ranks, Mode};

const TAG: i32 = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PingPongPoint {
    pub mode: Mode,
    pub size: usize,
    /// Half the median round trip, seconds.
    pub t_oneway: f64,
    /// Bytes per second.
    pub bandwidth: f64,
}

/// Ping-pong between ranks 0 and 1 for each size. Rank 0 returns the points.
pub fn run_pingpong(shim: &Shim, sizes: &[usize], reps: usize) -> Result<Vec<PingPongPoint>> {
    require_ranks(shim, "ping-pong", |n| n == 2, "exactly 2")?;
    if reps == 0 {
        return Err(Error::Usage("ping-pong needs at least one repetition".into()));
    }
    let rt = shim.runtime();
    let world = shim.world();
    let sync = rt.dup(&world);
    let mode = Mode::of(shim);
    let me = shim.rank();
    let peer = 1 - me;
    let mut out = Vec::new();
    for &size in sizes {
        let payload = vec![1u8; size];
        let mut trips = Vec::with_capacity(reps);
        barrier(rt, &sync)?;
        // one untimed round to set up connections and buffers
        for rep in 0..=reps {
            let t0 = Instant::now();
            if me == 0 {
                shim.wait(&shim.isend(payload.clone(), peer, TAG, &world)?)?;
                shim.wait(&shim.irecv(size, peer, TAG, &world)?)?;
            } else {
                shim.wait(&shim.irecv(size, peer, TAG, &world)?)?;
                shim.wait(&shim.isend(payload.clone(), peer, TAG, &world)?)?;
            }
            if rep > 0 {
                trips.push(t0.elapsed().as_secs_f64());
            }
        }
        if me == 0 {
            let t_oneway = median(&trips) / 2.0;
            out.push(PingPongPoint { mode, size, t_oneway, bandwidth: size as f64 / t_oneway });
        }
    }
    barrier(rt, &sync)?;
    Ok(out)
}

/// Fits t_c(V) over the points with `size >= min_size`.
pub fn fit_model(points: &[PingPongPoint], min_size: usize) -> Result<OverlapModel> {
    let pts: Vec<(usize, f64)> = points.iter().filter(|p| p.size >= min_size).map(|p| (p.size, p.t_oneway)).collect();
    if pts.len() < 2 {
        return Err(Error::Usage(format!(
            "model fit needs at least 2 sizes of {min_size} bytes or more, got {}",
            pts.len()
        )));
    }
    OverlapModel::fit(&pts)
}
