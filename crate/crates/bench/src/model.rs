use std::collections::BTreeMap;

use apr_core::{Error, Result};

use crate::stats::{linear_fit, median};
use crate::Mode;

/// One timed repetition of an overlap-style benchmark.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapSample {
    pub mode: Mode,
    /// Message or file volume in bytes.
    pub v: usize,
    pub t_w: f64,
    pub t_t: f64,
    pub rep: usize,
}

/// Medians of t_t per distinct t_w, ordered by t_w.
pub fn median_by_tw(samples: &[OverlapSample]) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.t_w.to_bits()).or_default().push(s.t_t);
    }
    let mut out: Vec<(f64, f64)> = groups.into_iter().map(|(k, v)| (f64::from_bits(k), median(&v))).collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Communication time model t_c(V) = V / B_N + t_l.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapModel {
    /// Bytes per second.
    pub bandwidth: f64,
    /// Seconds.
    pub latency: f64,
}

impl OverlapModel {
    pub fn t_c(&self, v: usize) -> f64 {
        v as f64 / self.bandwidth + self.latency
    }

    /// Least-squares fit over (bytes, seconds) points. A negative intercept
    /// is clamped to zero latency.
    pub fn fit(points: &[(usize, f64)]) -> Result<OverlapModel> {
        let pts: Vec<(f64, f64)> = points.iter().map(|&(v, t)| (v as f64, t)).collect();
        let f = linear_fit(&pts)?;
        if f.slope <= 0.0 {
            return Err(Error::Usage(format!("fitted time per byte {} is not positive", f.slope)));
        }
        Ok(OverlapModel { bandwidth: 1.0 / f.slope, latency: f.intercept.max(0.0) })
    }
}
