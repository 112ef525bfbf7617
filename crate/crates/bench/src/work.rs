//! CPU-bound workloads: a spin loop and the triad kernel.

use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Spins on the calling core until `duration` has elapsed on the monotonic
/// clock. Only registers are touched between clock reads.
pub fn busy_work(duration: Duration) {
    if duration.is_zero() {
        return;
    }
    let end = Instant::now() + duration;
    let mut x: u64 = 0x9e37_79b9_7f4a_7c15;
    while Instant::now() < end {
        for _ in 0..64 {
            x = x.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
        }
        x = black_box(x);
    }
}

/// Median cost of one monotonic clock read; the resolution of [`busy_work`].
pub fn calibrate() -> Duration {
    let mut samples: Vec<Duration> = (0..101)
        .map(|_| {
            let t = Instant::now();
            for _ in 0..100 {
                black_box(Instant::now());
            }
            t.elapsed() / 100
        })
        .collect();
    samples.sort();
    samples[samples.len() / 2]
}

/// Triad arrays `a = b * c + d`, sized to stay in a core's private cache.
#[derive(Debug, Clone)]
pub struct Triad {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

/// 32 KiB per array.
pub const DEFAULT_TRIAD_LEN: usize = 4096;

impl Triad {
    pub fn new(len: usize, seed: u64) -> Triad {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let (b, c, d) = (v(), v(), v());
        Triad { a: vec![0.0; len], b, c, d }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn sweep(&mut self) {
        for i in 0..self.a.len() {
            self.a[i] = self.b[i] * self.c[i] + self.d[i];
        }
        black_box(&mut self.a);
    }

    /// Repeats the sweep until `deadline`; returns the number of sweeps. At
    /// least one sweep runs.
    pub fn run_until(&mut self, deadline: Instant) -> u64 {
        let mut n = 0;
        loop {
            self.sweep();
            n += 1;
            if Instant::now() >= deadline {
                return n;
            }
        }
    }

    pub fn verify(&self) -> bool {
        (0..self.a.len()).all(|i| self.a[i] == self.b[i] * self.c[i] + self.d[i])
    }
}
