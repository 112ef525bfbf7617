//! Single-host job launcher: one worker process per rank.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use apr_core::runtime::{ENV_ENDPOINTS, ENV_LISTEN_FD, ENV_RANK, ENV_SIZE};
use apr_core::shim::ENV_LOCAL_INDEX;

use crate::output::merge_fragments;

/// Where a worker writes its CSV rows.
pub const ENV_CSV_FRAGMENT: &str = "APR_CSV_FRAGMENT";

/// Descriptor number the inherited listener gets in each worker.
const LISTEN_FD: i32 = 3;
const TAIL_LINES: usize = 20;
/// How long the surviving ranks get once one rank has failed.
const FAILURE_GRACE: Duration = Duration::from_secs(3);

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_LAUNCH: i32 = 3;

#[derive(Debug, Clone)]
pub struct JobSpec {
    pub exe: PathBuf,
    pub ranks: usize,
    /// Arguments after `worker --`.
    pub args: Vec<String>,
    pub env: Vec<(String, String)>,
    pub timeout: Duration,
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error("usage error reported by rank {rank}: {tail}")]
    Usage { rank: usize, tail: String },
    #[error("rank {rank} failed ({status}); last stderr lines:\n{tail}")]
    RankFailed { rank: usize, status: String, tail: String },
    #[error("job exceeded {0:?} and was killed")]
    Timeout(Duration),
    #[error("launch failed: {0}")]
    Launch(String),
}

impl LaunchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LaunchError::Usage { .. } => EXIT_USAGE,
            LaunchError::RankFailed { .. } | LaunchError::Timeout(_) => EXIT_FAILURE,
            LaunchError::Launch(_) => EXIT_LAUNCH,
        }
    }
}

/// Merged CSV of all ranks (rank order).
#[derive(Debug)]
pub struct LaunchOutcome {
    pub csv: String,
}

type Tail = Arc<Mutex<VecDeque<String>>>;

struct Rank {
    child: Child,
    status: Option<ExitStatus>,
    tail: Tail,
    pump: Option<JoinHandle<()>>,
}

fn spawn_pump(rank: usize, stderr: std::process::ChildStderr, tail: Tail) -> JoinHandle<()> {
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines() {
            let Ok(line) = line else { break };
            eprintln!("[rank {rank}] {line}");
            let mut t = tail.lock().expect("tail lock");
            if t.len() == TAIL_LINES {
                t.pop_front();
            }
            t.push_back(line);
        }
    })
}

#[cfg(unix)]
fn hand_over_listener(cmd: &mut Command, listener: &TcpListener) {
    use std::os::fd::AsRawFd;
    use std::os::unix::process::CommandExt;
    let fd = listener.as_raw_fd();
    // SAFETY: only async-signal-safe libc calls between fork and exec.
    unsafe {
        cmd.pre_exec(move || {
            if fd == LISTEN_FD {
                let flags = libc::fcntl(fd, libc::F_GETFD);
                if flags < 0 || libc::fcntl(fd, libc::F_SETFD, flags & !libc::FD_CLOEXEC) < 0 {
                    return Err(std::io::Error::last_os_error());
                }
            } else if libc::dup2(fd, LISTEN_FD) < 0 {
                return Err(std::io::Error::last_os_error());
            }
            Ok(())
        });
    }
}

#[cfg(not(unix))]
fn hand_over_listener(_cmd: &mut Command, _listener: &TcpListener) {}

fn kill_all(ranks: &mut [Rank]) {
    for r in ranks.iter_mut().filter(|r| r.status.is_none()) {
        let _ = r.child.kill();
        r.status = r.child.wait().ok();
    }
}

fn tail_of(r: &Rank) -> String {
    r.tail.lock().expect("tail lock").iter().cloned().collect::<Vec<_>>().join("\n")
}

/// Spawns `spec.ranks` workers, waits for all of them and merges their CSV
/// fragments. Workers still running `FAILURE_GRACE` after the first failure,
/// or at the timeout, are killed.
pub fn launch(spec: &JobSpec) -> Result<LaunchOutcome, LaunchError> {
    if spec.ranks == 0 {
        return Err(LaunchError::Usage { rank: 0, tail: "--ranks must be at least 1".into() });
    }
    let dir = tempfile::tempdir().map_err(|e| LaunchError::Launch(format!("temp dir: {e}")))?;
    let listeners: Vec<TcpListener> = (0..spec.ranks)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<_>>()
        .map_err(|e| LaunchError::Launch(format!("binding ports: {e}")))?;
    let endpoints = listeners
        .iter()
        .map(|l| l.local_addr().map(|a| a.to_string()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| LaunchError::Launch(e.to_string()))?
        .join(",");
    let fragment = |rank: usize| dir.path().join(format!("rank{rank}.csv"));

    let mut ranks: Vec<Rank> = Vec::with_capacity(spec.ranks);
    for (rank, listener) in listeners.iter().enumerate() {
        let mut cmd = Command::new(&spec.exe);
        cmd.arg("worker")
            .arg("--")
            .args(&spec.args)
            .envs(spec.env.iter().map(|(k, v)| (k.as_str(), v.as_str())))
            .env(ENV_RANK, rank.to_string())
            .env(ENV_SIZE, spec.ranks.to_string())
            .env(ENV_ENDPOINTS, &endpoints)
            .env(ENV_LOCAL_INDEX, rank.to_string())
            .env(ENV_LISTEN_FD, LISTEN_FD.to_string())
            .env(ENV_CSV_FRAGMENT, fragment(rank))
            .stdin(Stdio::null())
            .stdout(Stdio::inherit())
            .stderr(Stdio::piped());
        hand_over_listener(&mut cmd, listener);
        let mut child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                kill_all(&mut ranks);
                return Err(LaunchError::Launch(format!("spawning rank {rank} ({}): {e}", spec.exe.display())));
            }
        };
        let tail: Tail = Arc::default();
        let pump = child.stderr.take().map(|s| spawn_pump(rank, s, tail.clone()));
        ranks.push(Rank { child, status: None, tail, pump });
    }
    drop(listeners);

    let deadline = Instant::now() + spec.timeout;
    let mut first_failure: Option<Instant> = None;
    loop {
        for r in ranks.iter_mut().filter(|r| r.status.is_none()) {
            if let Ok(Some(st)) = r.child.try_wait() {
                if !st.success() && first_failure.is_none() {
                    first_failure = Some(Instant::now());
                }
                r.status = Some(st);
            }
        }
        if ranks.iter().all(|r| r.status.is_some()) {
            break;
        }
        if Instant::now() > deadline {
            kill_all(&mut ranks);
            join_pumps(&mut ranks);
            return Err(LaunchError::Timeout(spec.timeout));
        }
        if first_failure.is_some_and(|t| t.elapsed() > FAILURE_GRACE) {
            kill_all(&mut ranks);
            break;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    join_pumps(&mut ranks);

    // blame ranks that exited on their own before ranks that were killed
    let failed = ranks
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.status.is_some_and(|s| s.success()))
        .min_by_key(|(i, r)| (r.status.and_then(|s| s.code()).is_none(), *i));
    if let Some((rank, r)) = failed {
        let status = r.status.map_or("unknown status".to_string(), |s| s.to_string());
        if r.status.and_then(|s| s.code()) == Some(EXIT_USAGE) {
            return Err(LaunchError::Usage { rank, tail: tail_of(r) });
        }
        return Err(LaunchError::RankFailed { rank, status, tail: tail_of(r) });
    }

    let fragments: Vec<String> = (0..spec.ranks).map(|r| read_fragment(&fragment(r))).collect();
    let csv = merge_fragments(&fragments).map_err(|e| LaunchError::RankFailed {
        rank: 0,
        status: "bad CSV output".into(),
        tail: e.to_string(),
    })?;
    Ok(LaunchOutcome { csv })
}

fn read_fragment(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_default()
}

fn join_pumps(ranks: &mut [Rank]) {
    for r in ranks {
        if let Some(p) = r.pump.take() {
            let _ = p.join();
        }
    }
}
