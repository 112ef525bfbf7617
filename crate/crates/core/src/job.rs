//! In-process jobs: every rank runs on its own thread of the current process.
//! Used by tests and by the benchmark harness when no launcher is involved.

use std::net::TcpListener;
use std::thread;

use crate::error::Result;
use crate::runtime::{JobConfig, RuntimeOptions};
use crate::transport::{ChannelHub, TransportSetup};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    /// In-process byte channels.
    Channel,
    /// Loopback TCP sockets.
    Tcp,
}

/// Builds one [`JobConfig`] per rank.
pub fn local_jobs(size: usize, kind: TransportKind, options: &RuntimeOptions) -> Result<Vec<JobConfig>> {
    match kind {
        TransportKind::Channel => {
            let hub = ChannelHub::new(size);
            Ok((0..size)
                .map(|rank| JobConfig {
                    rank,
                    size,
                    transport: TransportSetup::Channel(hub.clone()),
                    options: options.clone(),
                })
                .collect())
        }
        TransportKind::Tcp => {
            let listeners = (0..size).map(|_| TcpListener::bind("127.0.0.1:0")).collect::<Result<Vec<_>, _>>()?;
            let endpoints = listeners.iter().map(|l| l.local_addr()).collect::<Result<Vec<_>, _>>()?;
            Ok(listeners
                .into_iter()
                .enumerate()
                .map(|(rank, l)| JobConfig {
                    rank,
                    size,
                    transport: TransportSetup::Tcp { endpoints: endpoints.clone(), listener: Some(l) },
                    options: options.clone(),
                })
                .collect())
        }
    }
}

/// Runs `f` once per rank on scoped threads and returns the results by rank.
/// A panic on any rank is propagated.
pub fn run_local<T, F>(size: usize, kind: TransportKind, options: &RuntimeOptions, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(JobConfig) -> T + Sync,
{
    let jobs = local_jobs(size, kind, options)?;
    let f = &f;
    Ok(thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|job| {
                thread::Builder::new()
                    .name(format!("rank-{}", job.rank))
                    .spawn_scoped(s, move || f(job))
                    .expect("spawn rank thread")
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    }))
}
