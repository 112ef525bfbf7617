//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use apr_bench::csr::CsrMatrix;
use apr_bench::ghostcell::{run_ghostcell, GhostParams, WorkKind};
use apr_bench::io_overlap::{expected_file, run_io_overlap, IoParams};
use apr_bench::model::median_by_tw;
use apr_bench::overlap::{run_overlap, OverlapParams, Variant};
use apr_bench::partition::partition_rows_by_nnz;
use apr_bench::pingpong::{fit_model, run_pingpong};
use apr_bench::spmv::{gather_to_root, relative_error, rhs, run_spmvm, serial_reference, LocalProblem, SpmvMode, SpmvParams};
use apr_bench::stats::{linear_fit, median};
use apr_bench::{barrier, Mode};
use apr_core::job::{local_jobs, run_local, TransportKind};
use apr_core::runtime::{MatchEvent, MatchPattern};
use apr_core::shim::{Handle, Shim, ShimConfig, Submission};
use apr_core::transport::MessageEnvelope;
use apr_core::{Runtime, RuntimeOptions, Source, Status, TagMatch, ThreadLevel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MIB: usize = 1 << 20;
const KIB: usize = 1 << 10;

// overlap (criteria 1-3)
const LINK_BW: u64 = 128 * MIB as u64;
const OVERLAP_V: usize = 10 * MIB;
const OVERLAP_REPS: usize = 10;
const SLOPE_TOL: f64 = 0.1;
const INTERCEPT_TOL: f64 = 0.20;
const ON_TOL: f64 = 0.15;
const OVERLAP_LIMIT: Duration = Duration::from_secs(60);
const LITMUS_V: usize = 8 * MIB;
const LITMUS_REPS: usize = 20;
const LITMUS_TOL: f64 = 0.10;
// eager bypass (4)
const BYPASS_MSGS: usize = 10_000;
const BYPASS_SIZE: usize = KIB;
const LATENCY_RATIO: f64 = 1.3;
// deadlock (5)
const SELF_LIMIT: Duration = Duration::from_secs(5);
const HANG_PROBE: Duration = Duration::from_secs(2);
// matching (6)
const SCHEDULES: usize = 1000;
// spMVM (7, 8)
const SPMV_TOL: f64 = 1e-12;
const SHIM_SPEEDUP: f64 = 0.9;
// ghost cells (9)
const GHOST_RANKS: [usize; 5] = [2, 3, 4, 6, 8];
const GHOST_VARIATION: f64 = 0.15;
const GHOST_RATIO: f64 = 0.30;
// I/O (10)
const IO_VOLUME: usize = 64 * MIB;
const IO_THROTTLE: u64 = 64 * MIB as u64;
const IO_TOL: f64 = 0.15;
// transparency (11)
const WORKLOADS: usize = 200;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn report(n: usize, title: &str, v: std::thread::Result<Verdict>, t0: Instant) -> bool {
    let v = v.unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        verdict(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {n:>2} {title}: {} ({}; {:.1} s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        t0.elapsed().as_secs_f64()
    );
    v.pass
}

fn opts() -> RuntimeOptions {
    RuntimeOptions::default()
}

fn paced() -> RuntimeOptions {
    RuntimeOptions { link_bandwidth: Some(LINK_BW), ..opts() }
}

/// Runs `f` on every rank of an in-process job and finalizes afterwards.
fn job<T: Send>(n: usize, kind: TransportKind, o: &RuntimeOptions, f: impl Fn(&Arc<Runtime>) -> T + Sync) -> Vec<T> {
    run_local(n, kind, o, |cfg| {
        let rt = Arc::new(Runtime::init(cfg, ThreadLevel::Multiple).unwrap());
        let out = f(&rt);
        rt.finalize().unwrap();
        out
    })
    .unwrap()
}

fn attach(rt: &Arc<Runtime>, mode: Mode) -> Shim {
    Shim::attach(rt.clone(), mode.config(&ShimConfig::default())).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b
}

// ---------------------------------------------------------------- 1, 2, 3

struct OverlapRun {
    t_c: f64,
    off: Vec<(f64, f64)>,
    on: Vec<(f64, f64)>,
    off_elapsed: Duration,
    on_elapsed: Duration,
    litmus: Vec<f64>,
    t_c_litmus: f64,
}

fn overlap_run() -> OverlapRun {
    let res = job(2, TransportKind::Tcp, &paced(), |rt| {
        let world = rt.world();
        let t0 = Instant::now();
        let mut shim = attach(rt, Mode::ShimOff);
        let sizes: Vec<usize> = (1..=5).map(|k| k * 2 * MIB).collect();
        let pts = run_pingpong(&shim, &sizes, 3).unwrap();
        let model = if rt.rank() == 0 {
            let m = fit_model(&pts, 0).unwrap();
            rt.send([m.bandwidth.to_le_bytes(), m.latency.to_le_bytes()].concat(), 1, 1, &world).unwrap();
            m
        } else {
            let (_, b) = rt.recv(16, 0usize, 1, &world).unwrap();
            let bw = f64::from_le_bytes(b[..8].try_into().unwrap());
            let lat = f64::from_le_bytes(b[8..].try_into().unwrap());
            apr_bench::model::OverlapModel { bandwidth: bw, latency: lat }
        };
        let t_c = model.t_c(OVERLAP_V);
        let mut params = OverlapParams {
            v: OVERLAP_V,
            sweep: [0.0, 0.25, 0.5, 1.0, 2.0, 4.0].iter().map(|m| Duration::from_secs_f64(m * t_c)).collect(),
            reps: OVERLAP_REPS,
            variant: Variant::IsendRecv,
        };
        let off = median_by_tw(&run_overlap(&shim, &params).unwrap());
        shim.detach().unwrap();
        let off_elapsed = t0.elapsed();

        let t1 = Instant::now();
        let mut shim = attach(rt, Mode::ShimOn);
        params.sweep.remove(0);
        let on = median_by_tw(&run_overlap(&shim, &params).unwrap());
        let on_elapsed = t1.elapsed();

        // litmus: the transfer has to move while rank 0 sleeps
        let t_c_litmus = model.t_c(LITMUS_V);
        let sync = rt.dup(&world);
        let payload = vec![7u8; LITMUS_V];
        let mut litmus = Vec::new();
        for _ in 0..LITMUS_REPS {
            barrier(rt, &sync).unwrap();
            if rt.rank() == 0 {
                let h = shim.isend(payload.clone(), 1, 3, &world).unwrap();
                thread::sleep(Duration::from_secs_f64(2.0 * t_c_litmus));
                let tw = Instant::now();
                shim.wait(&h).unwrap();
                litmus.push(tw.elapsed().as_secs_f64());
            } else {
                let h = shim.irecv(LITMUS_V, 0usize, 3, &world).unwrap();
                assert_eq!(shim.wait(&h).unwrap().received_bytes, LITMUS_V);
            }
        }
        shim.detach().unwrap();
        OverlapRun { t_c, off, on, off_elapsed, on_elapsed, litmus, t_c_litmus }
    });
    res.into_iter().next().unwrap()
}

fn criterion_1(r: &OverlapRun) -> Verdict {
    let fit = linear_fit(&r.off).unwrap();
    let ok = (fit.slope - 1.0).abs() <= SLOPE_TOL
        && rel(fit.intercept, r.t_c) <= INTERCEPT_TOL
        && r.off_elapsed < OVERLAP_LIMIT;
    verdict(
        ok,
        format!(
            "slope {:.3} (1 ± {SLOPE_TOL}), intercept {:.4} s vs t_c {:.4} s ({:+.1}%, limit ±{:.0}%), {:.1} s",
            fit.slope,
            fit.intercept,
            r.t_c,
            100.0 * (fit.intercept - r.t_c) / r.t_c,
            INTERCEPT_TOL * 100.0,
            r.off_elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2(r: &OverlapRun) -> Verdict {
    let worst = r
        .on
        .iter()
        .map(|&(tw, tt)| rel(tt, tw.max(r.t_c)))
        .fold(0.0f64, f64::max);
    let ok = worst <= ON_TOL && r.on_elapsed < OVERLAP_LIMIT;
    let pts: Vec<String> = r.on.iter().map(|(tw, tt)| format!("{:.0}->{:.0}ms", tw * 1e3, tt * 1e3)).collect();
    verdict(
        ok,
        format!(
            "max |t_t - max(t_c,t_w)| = {:.1}% (limit {:.0}%), t_c {:.1} ms, [{}], {:.1} s",
            worst * 100.0,
            ON_TOL * 100.0,
            r.t_c * 1e3,
            pts.join(" "),
            r.on_elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3(r: &OverlapRun) -> Verdict {
    let m = median(&r.litmus);
    verdict(
        m <= LITMUS_TOL * r.t_c_litmus,
        format!(
            "median wait {:.2} ms after sleeping 2 t_c, t_c {:.1} ms (limit {:.1} ms), {} reps",
            m * 1e3,
            r.t_c_litmus * 1e3,
            LITMUS_TOL * r.t_c_litmus * 1e3,
            r.litmus.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let res = job(2, TransportKind::Tcp, &opts(), |rt| {
        let world = rt.world();
        let sync = rt.dup(&world);
        let payload = vec![3u8; BYPASS_SIZE];
        let mut lat: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
        let mut enqueued = 0;
        let mut on_msgs = 0;
        // alternate blocks so drift hits both modes alike
        let blocks = [Mode::ShimOff, Mode::ShimOn, Mode::ShimOff, Mode::ShimOn];
        for mode in blocks {
            let mut shim = attach(rt, mode);
            let trips = BYPASS_MSGS / 4;
            barrier(rt, &sync).unwrap();
            for _ in 0..trips {
                let t0 = Instant::now();
                if rt.rank() == 0 {
                    shim.wait(&shim.isend(payload.clone(), 1, 4, &world).unwrap()).unwrap();
                    shim.wait(&shim.irecv(BYPASS_SIZE, 1usize, 4, &world).unwrap()).unwrap();
                } else {
                    shim.wait(&shim.irecv(BYPASS_SIZE, 0usize, 4, &world).unwrap()).unwrap();
                    shim.wait(&shim.isend(payload.clone(), 0, 4, &world).unwrap()).unwrap();
                }
                lat.entry(if mode == Mode::ShimOn { "on" } else { "off" })
                    .or_default()
                    .push(t0.elapsed().as_secs_f64());
            }
            if mode == Mode::ShimOn {
                enqueued += shim.stats().enqueued;
                on_msgs += 2 * trips;
            }
            shim.detach().unwrap();
        }
        (median(&lat["off"]), median(&lat["on"]), enqueued, on_msgs)
    });
    let (off, on, _, _) = res[0];
    let enq: u64 = res.iter().map(|r| r.2).sum();
    let msgs: usize = res.iter().map(|r| r.3).sum();
    verdict(
        enq == 0 && msgs >= BYPASS_MSGS && on <= LATENCY_RATIO * off,
        format!(
            "{msgs} messages of {BYPASS_SIZE} B with the shim, {enq} enqueued; median RTT on {:.1} us, off {:.1} us (ratio {:.2}, limit {LATENCY_RATIO})",
            on * 1e6,
            off * 1e6,
            on / off
        ),
    )
}

// ---------------------------------------------------------------- 5

fn self_exchange(cfg: ShimConfig, size: usize, limit: Duration) -> bool {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let cfgjob = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
        let shim = Shim::init(cfgjob, cfg).unwrap();
        let w = shim.world();
        let s = shim.isend(vec![1u8; size], 0, 0, &w).unwrap();
        let r = shim.irecv(size, 0usize, 0, &w).unwrap();
        let st = shim.wait_all(&[s, r.clone()]);
        let ok = st.is_ok() && r.take_data().map(|d| d.len()) == Some(size);
        let _ = tx.send(ok);
        // a hung shim stays leaked; a finished one shuts down normally
        let mut shim = shim;
        shim.finalize().unwrap();
    });
    rx.recv_timeout(limit).unwrap_or(false)
}

fn criterion_5() -> Verdict {
    let small = self_exchange(ShimConfig::default(), KIB, SELF_LIMIT);
    let large = self_exchange(ShimConfig::default(), 8 * MIB, SELF_LIMIT);
    let wrong = ShimConfig { submission: Submission::ProgressThreadBlocking, ..Default::default() };
    let hung = !self_exchange(wrong, 8 * MIB, HANG_PROBE);
    verdict(
        small && large && hung,
        format!(
            "self isend+irecv 1 KiB {}, 8 MiB {} (limit {} s); blocking submission from the progress thread {} within {} s",
            if small { "completed" } else { "stuck" },
            if large { "completed" } else { "stuck" },
            SELF_LIMIT.as_secs(),
            if hung { "hung as expected" } else { "did not hang" },
            HANG_PROBE.as_secs()
        ),
    )
}

// ---------------------------------------------------------------- 6

#[derive(Debug, Clone)]
struct Msg {
    src: usize,
    dst: usize,
    tag: i32,
    size: usize,
}

#[derive(Debug, Clone, Copy)]
struct Recv {
    source: Option<usize>,
    tag: Option<i32>,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Send(usize),
    Recv(usize),
}

struct Schedule {
    ranks: usize,
    msgs: Vec<Msg>,
    recvs: Vec<Vec<Recv>>,
    ops: Vec<Vec<(Op, bool)>>,
}

const MATCH_SIZES: [usize; 4] = [8, 64, 200, 1000];
const MATCH_EAGER: usize = 128;

/// Receive patterns per rank form a nested family (exact, then source-only or
/// tag-only, then fully wild) posted most specific first, so every receive
/// completes whatever the arrival order.
fn schedule(rng: &mut ChaCha8Rng, ranks: usize) -> Schedule {
    let n = rng.gen_range(1..=24);
    let msgs: Vec<Msg> = (0..n)
        .map(|_| Msg {
            src: rng.gen_range(0..ranks),
            dst: rng.gen_range(0..ranks),
            tag: rng.gen_range(0..3),
            size: *MATCH_SIZES.choose(rng).unwrap(),
        })
        .collect();
    let mut recvs = Vec::new();
    for dst in 0..ranks {
        let by_source = rng.gen_bool(0.5);
        let mut levels: Vec<Vec<Recv>> = vec![Vec::new(); 3];
        for m in msgs.iter().filter(|m| m.dst == dst) {
            let level = rng.gen_range(0..3);
            let r = match level {
                0 => Recv { source: Some(m.src), tag: Some(m.tag) },
                1 if by_source => Recv { source: Some(m.src), tag: None },
                1 => Recv { source: None, tag: Some(m.tag) },
                _ => Recv { source: None, tag: None },
            };
            levels[level].push(r);
        }
        let mut mine = Vec::new();
        for mut l in levels {
            l.shuffle(rng);
            mine.extend(l);
        }
        recvs.push(mine);
    }
    let ops = (0..ranks)
        .map(|me| {
            let mut sends: VecDeque<usize> = msgs.iter().enumerate().filter(|(_, m)| m.src == me).map(|(i, _)| i).collect();
            let mut rs: VecDeque<usize> = (0..recvs[me].len()).collect();
            let mut out = Vec::new();
            while !sends.is_empty() || !rs.is_empty() {
                let take_send = rs.is_empty() || (!sends.is_empty() && rng.gen_bool(0.5));
                let op = if take_send { Op::Send(sends.pop_front().unwrap()) } else { Op::Recv(rs.pop_front().unwrap()) };
                out.push((op, rng.gen_bool(0.2)));
            }
            out
        })
        .collect();
    Schedule { ranks, msgs, recvs, ops }
}

/// Serial matcher replaying the recorded postings and arrivals: a posting
/// takes the oldest matching unexpected message, an arrival goes to the
/// oldest matching posted receive.
fn reference_pairs(trace: &[MatchEvent]) -> HashMap<u64, MessageEnvelope> {
    let mut posted: Vec<(u64, MatchPattern)> = Vec::new();
    let mut unexpected: Vec<MessageEnvelope> = Vec::new();
    let mut pairs = HashMap::new();
    for ev in trace {
        match *ev {
            MatchEvent::Posted { request, pattern } => {
                if let Some(i) = unexpected.iter().position(|e| pattern.matches(e)) {
                    pairs.insert(request, unexpected.remove(i));
                } else {
                    posted.push((request, pattern));
                }
            }
            MatchEvent::Arrived { envelope } => {
                if let Some(i) = posted.iter().position(|(_, p)| p.matches(&envelope)) {
                    pairs.insert(posted.remove(i).0, envelope);
                } else {
                    unexpected.push(envelope);
                }
            }
        }
    }
    pairs
}

fn arrivals_in_order(trace: &[MatchEvent]) -> bool {
    let mut last: HashMap<(u32, u32), u64> = HashMap::new();
    trace.iter().all(|ev| match ev {
        MatchEvent::Arrived { envelope: e } => {
            let prev = last.insert((e.context_id, e.source), e.seq);
            prev.is_none_or(|p| p < e.seq)
        }
        MatchEvent::Posted { .. } => true,
    })
}

fn run_schedule(s: &Schedule) -> Result<(), String> {
    let o = RuntimeOptions { eager_threshold: MATCH_EAGER, trace_matching: true, ..opts() };
    let results = job(s.ranks, TransportKind::Channel, &o, |rt| {
        let me = rt.rank();
        let w = rt.world();
        let mut sends = Vec::new();
        let mut recvs = Vec::new();
        for &(op, yield_after) in &s.ops[me] {
            match op {
                Op::Send(i) => {
                    let m = &s.msgs[i];
                    let mut data = vec![0u8; m.size];
                    data[..4].copy_from_slice(&(i as u32).to_le_bytes());
                    sends.push(rt.isend(data, m.dst, m.tag, &w).unwrap());
                }
                Op::Recv(k) => {
                    let r = s.recvs[me][k];
                    let src = r.source.map_or(Source::Any, Source::Rank);
                    let tag = r.tag.map_or(TagMatch::Any, TagMatch::Tag);
                    recvs.push(rt.irecv(1000, src, tag, &w).unwrap());
                }
            }
            if yield_after {
                thread::yield_now();
            }
        }
        rt.wait_all(&recvs).unwrap();
        rt.wait_all(&sends).unwrap();
        let trace = rt.take_match_trace();
        let got: Vec<(u64, MessageEnvelope, usize)> = recvs
            .iter()
            .map(|r| {
                let d = r.take_data().unwrap();
                (r.id(), r.envelope().unwrap(), u32::from_le_bytes(d[..4].try_into().unwrap()) as usize)
            })
            .collect();
        (trace, got)
    });
    for (rank, (trace, got)) in results.iter().enumerate() {
        if !arrivals_in_order(trace) {
            return Err(format!("rank {rank}: arrivals from one source out of sequence"));
        }
        let want = reference_pairs(trace);
        for (id, env, idx) in got {
            let Some(r) = want.get(id) else { return Err(format!("rank {rank}: request {id} unmatched by reference")) };
            if (r.source, r.seq, r.tag) != (env.source, env.seq, env.tag) {
                return Err(format!("rank {rank}: request {id} got {env:?}, reference {r:?}"));
            }
            let m = &s.msgs[*idx];
            if (m.src as u32, m.tag, m.dst) != (env.source, env.tag, rank) {
                return Err(format!("rank {rank}: payload of message {idx} under envelope {env:?}"));
            }
        }
        if want.len() != got.len() {
            return Err(format!("rank {rank}: reference made {} pairs, runtime {}", want.len(), got.len()));
        }
    }
    Ok(())
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut wild = 0;
    let mut msgs = 0;
    for i in 0..SCHEDULES {
        let s = schedule(&mut rng, 2 + i % 3);
        wild += s.recvs.iter().flatten().filter(|r| r.source.is_none() || r.tag.is_none()).count();
        msgs += s.msgs.len();
        if let Err(e) = run_schedule(&s) {
            return verdict(false, format!("schedule {i} ({} ranks): {e}", s.ranks));
        }
    }
    verdict(true, format!("{SCHEDULES} schedules on 2-4 ranks, {msgs} messages, {wild} wildcard receives, all pairings equal"))
}

// ---------------------------------------------------------------- 7, 8

fn spmv_modes(
    rt: &Arc<Runtime>,
    m: &CsrMatrix,
    modes: &[SpmvMode],
    threads: usize,
    iterations: usize,
    seed: u64,
) -> Vec<(SpmvMode, f64, Option<Vec<f64>>)> {
    let part = partition_rows_by_nnz(m, rt.size()).unwrap();
    let prob = LocalProblem::new(m, &part, rt.rank());
    let x = rhs(m.n_rows, seed);
    let xl = &x[prob.rows.clone()];
    modes
        .iter()
        .map(|&mode| {
            let mut shim = attach(rt, if mode == SpmvMode::VectorShim { Mode::ShimOn } else { Mode::ShimOff });
            let out = run_spmvm(&shim, &prob, xl, &SpmvParams { mode, threads, iterations }).unwrap();
            let y = gather_to_root(&shim, &out.y).unwrap();
            shim.detach().unwrap();
            (mode, out.seconds_per_multiply, y)
        })
        .collect()
}

fn criterion_7() -> Verdict {
    let mats = [("random", CsrMatrix::random(10_000, 8, 71)), ("banded", CsrMatrix::banded(10_000, 700, 12, 72))];
    let mut worst = 0.0f64;
    let mut runs = 0;
    for (name, m) in &mats {
        let reference = serial_reference(m, &rhs(m.n_rows, 7), 3);
        for ranks in [1, 2, 3, 5, 8] {
            let res = job(ranks, TransportKind::Channel, &opts(), |rt| spmv_modes(rt, m, &SpmvMode::ALL, 2, 3, 7));
            for (mode, _, y) in &res[0] {
                let e = relative_error(y.as_ref().unwrap(), &reference);
                runs += 1;
                if e > SPMV_TOL || e.is_nan() {
                    return verdict(false, format!("{name} matrix, {ranks} ranks, {}: relative error {e:.3e}", mode.name()));
                }
                worst = worst.max(e);
            }
        }
    }
    verdict(true, format!("{runs} runs (random and banded, 10^4 rows, 1-8 ranks, 3 modes), worst relative error {worst:.2e}"))
}

fn criterion_8() -> Verdict {
    let m = CsrMatrix::banded(200_000, 40_000, 16, 81);
    let x = rhs(m.n_rows, 8);
    let mut serial = Vec::new();
    for _ in 0..5 {
        let mut y = vec![0.0; m.n_rows];
        let t0 = Instant::now();
        m.spmv_add(&x, &mut y);
        serial.push(t0.elapsed().as_secs_f64());
    }
    let t_s = median(&serial);
    let part = partition_rows_by_nnz(&m, 2).unwrap();
    let halo = LocalProblem::new(&m, &part, 0).recv_len() * 8;
    // pace the link so one halo transfer takes as long as a serial multiply
    let bw = (halo as f64 / t_s) as u64;
    let o = RuntimeOptions { link_bandwidth: Some(bw), ..opts() };
    let order = [SpmvMode::Vector, SpmvMode::VectorShim, SpmvMode::Task];
    let rounds: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let res = job(2, TransportKind::Tcp, &o, |rt| spmv_modes(rt, &m, &order, 2, 8, 8));
            // slowest rank per mode
            (0..order.len()).map(|i| res.iter().map(|r| r[i].1).fold(0.0, f64::max)).collect()
        })
        .collect();
    let per_mode: Vec<f64> = (0..order.len()).map(|i| median(&rounds.iter().map(|r| r[i]).collect::<Vec<_>>())).collect();
    let (vector, shim, task) = (per_mode[0], per_mode[1], per_mode[2]);
    verdict(
        shim < SHIM_SPEEDUP * vector && task < vector,
        format!(
            "s/multiply VECTOR {:.2} ms, VECTOR_SHIM {:.2} ms ({:.2}x, limit {SHIM_SPEEDUP}), TASK {:.2} ms ({:.2}x); halo {} KiB at {:.1} MB/s, serial multiply {:.2} ms",
            vector * 1e3,
            shim * 1e3,
            shim / vector,
            task * 1e3,
            task / vector,
            halo / KIB,
            bw as f64 / 1e6,
            t_s * 1e3
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    // more spinning ranks than cores would measure scheduler contention
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let work_kind = if cores < 2 * GHOST_RANKS[GHOST_RANKS.len() - 1] { WorkKind::Idle } else { WorkKind::Compute };
    let params = GhostParams {
        halo_bytes: MIB,
        base_work: Duration::from_millis(256),
        iterations: 8,
        work_kind,
        ..Default::default()
    };
    let t_c = MIB as f64 / LINK_BW as f64;
    let mut off = Vec::new();
    let mut on = Vec::new();
    let mut min_tw = f64::INFINITY;
    for n in GHOST_RANKS {
        let res = job(n, TransportKind::Tcp, &paced(), |rt| {
            Mode::BOTH
                .iter()
                .map(|&mode| {
                    let mut shim = attach(rt, mode);
                    let b = run_ghostcell(&shim, &params).unwrap();
                    shim.detach().unwrap();
                    b
                })
                .collect::<Vec<_>>()
        });
        let mean = |i: usize| res.iter().map(|r| r[i].t_visible_comm).sum::<f64>() / n as f64;
        off.push(mean(0));
        on.push(mean(1));
        min_tw = min_tw.min(res.iter().map(|r| r[1].t_w).fold(f64::INFINITY, f64::min));
    }
    let lo = off.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = off.iter().cloned().fold(0.0, f64::max);
    let variation = (hi - lo) / lo;
    let worst_ratio = on.iter().zip(&off).map(|(a, b)| a / b).fold(0.0, f64::max);
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{:.2}", x * 1e3)).collect::<Vec<_>>().join("/");
    verdict(
        variation <= GHOST_VARIATION && worst_ratio <= GHOST_RATIO && min_tw > t_c,
        format!(
            "ranks {GHOST_RANKS:?}, {work_kind:?} work on {cores} cores: visible comm off {} ms (spread {:.1}%, limit {:.0}%), on {} ms (worst ratio {:.2}, limit {GHOST_RATIO}); min t_w {:.1} ms > t_c {:.1} ms",
            fmt(&off),
            variation * 100.0,
            GHOST_VARIATION * 100.0,
            fmt(&on),
            worst_ratio,
            min_tw * 1e3,
            t_c * 1e3
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("io.bin");
    let t_io = IO_VOLUME as f64 / IO_THROTTLE as f64;
    let params = IoParams {
        path: path.clone(),
        volume: IO_VOLUME,
        sweep: [0.0, 0.5, 1.0, 2.0].iter().map(|m| Duration::from_secs_f64(m * t_io)).collect(),
        reps: 2,
        throttle: Some(IO_THROTTLE),
        seed: 10,
    };
    let res = job(2, TransportKind::Channel, &opts(), |rt| {
        Mode::BOTH
            .iter()
            .map(|&mode| {
                let mut shim = attach(rt, mode);
                let s = run_io_overlap(&shim, &params).unwrap();
                shim.detach().unwrap();
                s
            })
            .collect::<Vec<_>>()
    });
    let mut worst = [0.0f64; 2];
    let mut lines = Vec::new();
    for (i, mode) in Mode::BOTH.iter().enumerate() {
        let all: Vec<_> = res.iter().flat_map(|r| r[i].clone()).collect();
        for (tw, tt) in median_by_tw(&all) {
            let want = if *mode == Mode::ShimOn { t_io.max(tw) } else { t_io + tw };
            worst[i] = worst[i].max(rel(tt, want));
            lines.push(format!("{mode} {tw:.1}->{tt:.2}s"));
        }
    }
    let same = std::fs::read(&path).unwrap() == expected_file(2, IO_VOLUME, params.seed);
    verdict(
        worst.iter().all(|&w| w <= IO_TOL) && same,
        format!(
            "worst deviation off {:.1}%, on {:.1}% (limit {:.0}%), file {}; [{}]",
            worst[0] * 100.0,
            worst[1] * 100.0,
            IO_TOL * 100.0,
            if same { "identical to oracle" } else { "DIFFERS from oracle" },
            lines.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 11

const MIXED_SIZES: [usize; 8] = [0, 1, 100, KIB, 256 * KIB, 256 * KIB + 1, 700 * KIB, 64];

#[derive(Debug, Clone)]
struct Mixed {
    msgs: Vec<Msg>,
    /// (capacity, any_source, any_tag) per message, on its receiver.
    recv: Vec<(usize, bool, bool)>,
    ops: Vec<Vec<Op>>,
    wait_order: Vec<Vec<usize>>,
    shim_threshold: usize,
}

/// Wildcards are only used where the outcome cannot depend on timing: any
/// source when a rank hears from one source only, any tag when every receive
/// on that (source, receiver) pair uses it.
fn mixed(rng: &mut ChaCha8Rng, idx: usize) -> Mixed {
    let dirs: Vec<(usize, usize)> = loop {
        let d: Vec<_> = [(0, 1), (1, 0), (0, 0), (1, 1)].into_iter().filter(|_| rng.gen_bool(0.6)).collect();
        if !d.is_empty() {
            break d;
        }
    };
    let n = rng.gen_range(1..=16);
    let msgs: Vec<Msg> = (0..n)
        .map(|_| {
            let (src, dst) = *dirs.choose(rng).unwrap();
            Msg { src, dst, tag: rng.gen_range(0..4), size: *MIXED_SIZES.choose(rng).unwrap() }
        })
        .collect();
    let any_tag: HashMap<(usize, usize), bool> = dirs.iter().map(|&d| (d, rng.gen_bool(0.4))).collect();
    let single_source: Vec<bool> = (0..2).map(|r| dirs.iter().filter(|d| d.1 == r).count() == 1).collect();
    let recv = msgs
        .iter()
        .map(|m| {
            let cap = match rng.gen_range(0..6) {
                0 if m.size > 0 => m.size / 2,
                1 => m.size + 10,
                _ => m.size,
            };
            (cap, single_source[m.dst] && rng.gen_bool(0.5), any_tag[&(m.src, m.dst)])
        })
        .collect();
    let mut ops = vec![Vec::new(), Vec::new()];
    for (me, list) in ops.iter_mut().enumerate() {
        let mut sends: VecDeque<usize> = (0..n).filter(|&i| msgs[i].src == me).collect();
        let mut recvs: VecDeque<usize> = (0..n).filter(|&i| msgs[i].dst == me).collect();
        while !sends.is_empty() || !recvs.is_empty() {
            let s = recvs.is_empty() || (!sends.is_empty() && rng.gen_bool(0.5));
            list.push(if s { Op::Send(sends.pop_front().unwrap()) } else { Op::Recv(recvs.pop_front().unwrap()) });
        }
    }
    let wait_order = ops
        .iter()
        .map(|o| {
            let mut w: Vec<usize> = (0..o.len()).collect();
            w.shuffle(rng);
            w
        })
        .collect();
    let shim_threshold = if idx % 4 == 3 { 0 } else { apr_core::DEFAULT_EAGER_THRESHOLD };
    Mixed { msgs, recv, ops, wait_order, shim_threshold }
}

type Stream = Vec<(Status, Option<Vec<u8>>)>;

fn run_mixed(shim: &Shim, w: &Mixed) -> Stream {
    let me = shim.rank();
    let comm = shim.runtime().dup(&shim.world());
    let handles: Vec<Handle> = w.ops[me]
        .iter()
        .map(|op| match *op {
            Op::Send(i) => {
                let m = &w.msgs[i];
                let data: Vec<u8> = (0..m.size).map(|k| (k as u8) ^ (i as u8)).collect();
                shim.isend(data, m.dst, m.tag, &comm).unwrap()
            }
            Op::Recv(i) => {
                let (cap, any_src, any_tag) = w.recv[i];
                let m = &w.msgs[i];
                let src = if any_src { Source::Any } else { Source::Rank(m.src) };
                let tag = if any_tag { TagMatch::Any } else { TagMatch::Tag(m.tag) };
                shim.irecv(cap, src, tag, &comm).unwrap()
            }
        })
        .collect();
    let mut out: Vec<Option<(Status, Option<Vec<u8>>)>> = vec![None; handles.len()];
    for &k in &w.wait_order[me] {
        let st = shim.wait(&handles[k]).unwrap();
        let data = match w.ops[me][k] {
            Op::Recv(_) => Some(handles[k].take_data().map(|d| d.to_vec()).unwrap_or_default()),
            Op::Send(_) => None,
        };
        out[k] = Some((st, data));
    }
    out.into_iter().map(Option::unwrap).collect()
}

fn criterion_11() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let workloads: Vec<Mixed> = (0..WORKLOADS).map(|i| mixed(&mut rng, i)).collect();
    let mut ops = 0;
    let mut truncated = 0;
    for (i, w) in workloads.iter().enumerate() {
        let res = job(2, TransportKind::Channel, &opts(), |rt| {
            let mut streams = Vec::new();
            for mode in Mode::BOTH {
                let cfg = ShimConfig { eager_threshold: w.shim_threshold, ..mode.config(&ShimConfig::default()) };
                let mut shim = Shim::attach(rt.clone(), cfg).unwrap();
                streams.push(run_mixed(&shim, w));
                shim.detach().unwrap();
            }
            streams
        });
        for (rank, s) in res.iter().enumerate() {
            if s[0] != s[1] {
                let k = s[0].iter().zip(&s[1]).position(|(a, b)| a != b).unwrap_or(0);
                return verdict(
                    false,
                    format!("workload {i}, rank {rank}, op {k}: off {:?} vs on {:?}", s[0][k].0, s[1].get(k).map(|x| x.0)),
                );
            }
            ops += s[0].len();
            truncated += s[0].iter().filter(|(st, _)| st.error == apr_core::StatusError::Truncated).count();
        }
    }
    verdict(true, format!("{WORKLOADS} workloads, {ops} operations ({truncated} truncated receives), streams identical"))
}

// ----------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let mut all = true;

    let t0 = Instant::now();
    let ov = catch_unwind(overlap_run);
    match ov {
        Ok(r) => {
            all &= report(1, "overlap without progress thread", Ok(criterion_1(&r)), t0);
            all &= report(2, "overlap with progress thread", Ok(criterion_2(&r)), t0);
            all &= report(3, "asynchrony litmus", Ok(criterion_3(&r)), t0);
        }
        Err(p) => {
            let msg = p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panic".into());
            for (n, t) in [(1, "overlap without progress thread"), (2, "overlap with progress thread"), (3, "asynchrony litmus")] {
                all &= report(n, t, Ok(verdict(false, format!("overlap job panicked: {msg}"))), t0);
            }
        }
    }
    type Criterion = (usize, &'static str, fn() -> Verdict);
    let rest: [Criterion; 8] = [
        (4, "eager bypass", criterion_4),
        (5, "self-exchange deadlock regression", criterion_5),
        (6, "matching oracle", criterion_6),
        (7, "spMVM correctness", criterion_7),
        (8, "spMVM overlap benefit", criterion_8),
        (9, "ghost-cell breakdown", criterion_9),
        (10, "I/O overlap", criterion_10),
        (11, "transparency differential", criterion_11),
    ];
    for (n, title, f) in rest {
        let t0 = Instant::now();
        all &= report(n, title, catch_unwind(AssertUnwindSafe(f)), t0);
    }
    println!("acceptance: {} in {:.1} s", if all { "all criteria passed" } else { "FAILED" }, started.elapsed().as_secs_f64());
    if !all {
        std::process::exit(1);
    }
}
