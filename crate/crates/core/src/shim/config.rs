use std::time::Duration;

use crate::error::{Error, Result};
use crate::runtime::{env_parse, DEFAULT_EAGER_THRESHOLD, ENV_EAGER_THRESHOLD};

pub const ENV_ASYNC: &str = "APR_ASYNC";
pub const ENV_ASYNC_CPU_LIST: &str = "APR_ASYNC_CPU_LIST";
pub const ENV_WAITSET: &str = "APR_WAITSET";
pub const ENV_LOCAL_INDEX: &str = "APR_LOCAL_INDEX";

/// How the progress thread serves its working set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitsetStrategy {
    /// Poll with `test_some`, backing off exponentially while idle.
    TestSome,
    /// Block in `wait_any` (bounded by the maximum backoff so new work is
    /// picked up).
    WaitAny,
}

impl std::str::FromStr for WaitsetStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "test_some" => Ok(WaitsetStrategy::TestSome),
            "wait_any" => Ok(WaitsetStrategy::WaitAny),
            other => Err(Error::Config(format!("unknown waitset strategy {other:?}"))),
        }
    }
}

/// Which thread issues the underlying point-to-point calls.
///
/// Only [`Submission::ApplicationThread`] is correct. The other variant exists
/// so tests can demonstrate the hang it causes: the progress thread submits a
/// send and blocks in wait on it, so a matching receive queued behind it is
/// never issued.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Submission {
    ApplicationThread,
    ProgressThreadBlocking,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShimConfig {
    pub enabled: bool,
    /// Payloads up to this size bypass the progress thread. 0 proxies all.
    pub eager_threshold: usize,
    pub affinity_list: Vec<usize>,
    /// Index of this process among the processes of its node.
    pub local_index: usize,
    pub poll_backoff: (Duration, Duration),
    pub waitset_strategy: WaitsetStrategy,
    #[doc(hidden)]
    pub submission: Submission,
}

impl Default for ShimConfig {
    fn default() -> Self {
        ShimConfig {
            enabled: true,
            eager_threshold: DEFAULT_EAGER_THRESHOLD,
            affinity_list: Vec::new(),
            local_index: 0,
            poll_backoff: (Duration::from_micros(1), Duration::from_millis(1)),
            waitset_strategy: WaitsetStrategy::TestSome,
            submission: Submission::ApplicationThread,
        }
    }
}

impl ShimConfig {
    pub fn disabled() -> Self {
        ShimConfig { enabled: false, ..Default::default() }
    }

    /// Reads `APR_ASYNC`, `APR_ASYNC_CPU_LIST`, `APR_EAGER_THRESHOLD`,
    /// `APR_WAITSET` and `APR_LOCAL_INDEX`, falling back to defaults.
    pub fn from_env() -> Result<Self> {
        let mut cfg = ShimConfig::default();
        if let Ok(v) = std::env::var(ENV_ASYNC) {
            cfg.enabled = match v.trim() {
                "" | "1" | "on" | "true" => true,
                "0" | "off" | "false" => false,
                other => return Err(Error::Config(format!("{ENV_ASYNC}={other:?}"))),
            };
        }
        if let Ok(v) = std::env::var(ENV_ASYNC_CPU_LIST) {
            cfg.affinity_list = parse_affinity(&v)?;
        }
        if let Some(t) = env_parse(ENV_EAGER_THRESHOLD)? {
            cfg.eager_threshold = t;
        }
        if let Some(s) = env_parse::<String>(ENV_WAITSET)? {
            cfg.waitset_strategy = s.parse()?;
        }
        if let Some(i) = env_parse(ENV_LOCAL_INDEX)? {
            cfg.local_index = i;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.poll_backoff.0 > self.poll_backoff.1 {
            return Err(Error::Config(format!(
                "minimum backoff {:?} exceeds maximum {:?}",
                self.poll_backoff.0, self.poll_backoff.1
            )));
        }
        Ok(())
    }

    /// Core the progress thread of this process should be pinned to.
    pub fn progress_core(&self) -> Option<usize> {
        self.affinity_list.get(self.local_index).copied()
    }

    /// True when a message of `len` bytes skips the progress thread.
    pub fn bypasses(&self, len: usize) -> bool {
        self.eager_threshold > 0 && len <= self.eager_threshold
    }
}

/// Parses an underscore-separated core list such as `0_2_4`. The i-th
/// process on a node takes the i-th entry; processes beyond the list stay
/// unpinned.
pub fn parse_affinity(spec: &str) -> Result<Vec<usize>> {
    let spec = spec.trim();
    if spec.is_empty() {
        return Ok(Vec::new());
    }
    spec.split('_')
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid core id {tok:?} in affinity list {spec:?}")))
        })
        .collect()
}

/// Pins the calling thread to `core`. Returns false where pinning is not
/// possible; callers treat that as a no-op.
pub(crate) fn pin_current_thread(core: usize) -> bool {
    #[cfg(target_os = "linux")]
    {
        // SAFETY: cpu_set_t is plain data; the libc macros only touch the set.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            if core >= libc::CPU_SETSIZE as usize {
                return false;
            }
            libc::CPU_SET(core, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = core;
        false
    }
}
