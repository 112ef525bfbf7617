//! CSV rows of each benchmark. Every file starts with a header row.

use std::io::Write;

use apr_core::{Error, Result};

use crate::ghostcell::GhostBreakdown;
use crate::model::OverlapSample;
use crate::pingpong::PingPongPoint;

pub const OVERLAP_HEADER: [&str; 5] = ["mode", "V", "t_w", "t_t", "rep"];
pub const IO_HEADER: [&str; 6] = ["mode", "rank", "V", "t_w", "t_t", "rep"];
pub const PINGPONG_HEADER: [&str; 4] = ["mode", "V", "t_oneway", "bandwidth"];
pub const GHOST_HEADER: [&str; 7] = ["mode", "nprocs", "rank", "halo_bytes", "t_w", "t_visible_comm", "t_total"];
pub const SPMVM_HEADER: [&str; 9] = [
    "mode",
    "nprocs",
    "rank",
    "threads",
    "n_rows",
    "nnz",
    "seconds_per_multiply",
    "multiplies_per_second",
    "rel_error",
];

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes `header` and `rows` to `out`.
pub fn write_csv<W: Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn overlap_rows(samples: &[OverlapSample]) -> Vec<Vec<String>> {
    samples
        .iter()
        .map(|s| vec![s.mode.to_string(), s.v.to_string(), format!("{:.9}", s.t_w), format!("{:.9}", s.t_t), s.rep.to_string()])
        .collect()
}

pub fn io_rows(rank: usize, samples: &[OverlapSample]) -> Vec<Vec<String>> {
    overlap_rows(samples)
        .into_iter()
        .map(|mut r| {
            r.insert(1, rank.to_string());
            r
        })
        .collect()
}

pub fn pingpong_rows(points: &[PingPongPoint]) -> Vec<Vec<String>> {
    points
        .iter()
        .map(|p| vec![p.mode.to_string(), p.size.to_string(), format!("{:.9}", p.t_oneway), format!("{:.1}", p.bandwidth)])
        .collect()
}

pub fn ghost_rows(b: &[GhostBreakdown]) -> Vec<Vec<String>> {
    b.iter()
        .map(|g| {
            vec![
                g.mode.to_string(),
                g.nprocs.to_string(),
                g.rank.to_string(),
                g.halo_bytes.to_string(),
                format!("{:.9}", g.t_w),
                format!("{:.9}", g.t_visible_comm),
                format!("{:.9}", g.t_total),
            ]
        })
        .collect()
}

/// Concatenates CSV fragments that each start with the same header, keeping
/// one header. Fragments are taken in the given order.
pub fn merge_fragments(fragments: &[String]) -> Result<String> {
    let mut out = String::new();
    let mut header: Option<&str> = None;
    for f in fragments {
        let mut lines = f.lines();
        let Some(h) = lines.next() else { continue };
        match header {
            None => {
                header = Some(h);
                out.push_str(h);
                out.push('\n');
            }
            Some(prev) if prev != h => {
                return Err(Error::Usage(format!("CSV fragments disagree on header: {prev:?} vs {h:?}")));
            }
            Some(_) => {}
        }
        for l in lines.filter(|l| !l.is_empty()) {
            out.push_str(l);
            out.push('\n');
        }
    }
    Ok(out)
}
