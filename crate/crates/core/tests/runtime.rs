use std::sync::Arc;
use std::thread;
use std::time::Duration;

use apr_core::job::{local_jobs, run_local, TransportKind};
use apr_core::runtime::{Phase, RequestKind};
use apr_core::{Runtime, RuntimeOptions, Source, StatusError, TagMatch, ThreadLevel};

fn opts() -> RuntimeOptions {
    RuntimeOptions::default()
}

fn pattern(len: usize, seed: u8) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect()
}

#[test]
fn init_always_grants_multiple() {
    for requested in [ThreadLevel::Single, ThreadLevel::Multiple] {
        let job = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
        let rt = Runtime::init(job, requested).unwrap();
        assert_eq!(rt.thread_level(), ThreadLevel::Multiple);
        rt.finalize().unwrap();
    }
}

#[test]
fn two_ranks_exchange_after_init() {
    for kind in [TransportKind::Channel, TransportKind::Tcp] {
        let out = run_local(2, kind, &opts(), |job| {
            let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
            let w = rt.world();
            let res = if rt.rank() == 0 {
                rt.send(b"hello".to_vec(), 1, 3, &w).unwrap();
                None
            } else {
                let (st, data) = rt.recv(16, 0usize, 3, &w).unwrap();
                assert_eq!(st.source, 0);
                assert_eq!(st.tag, 3);
                Some(data.to_vec())
            };
            rt.finalize().unwrap();
            res
        })
        .unwrap();
        assert_eq!(out[1].as_deref(), Some(&b"hello"[..]));
    }
}

#[test]
fn empty_message_completes_eagerly() {
    let job = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
    let rt = Runtime::init(job, ThreadLevel::Single).unwrap();
    let w = rt.world();
    let s = rt.isend(Vec::new(), 0, 0, &w).unwrap();
    assert_eq!(s.phase(), Phase::Complete);
    let (st, data) = rt.recv(0, 0usize, 0, &w).unwrap();
    assert_eq!(st.received_bytes, 0);
    assert!(data.is_empty());
    assert_eq!(rt.wait(&s).unwrap().received_bytes, 0);
    rt.finalize().unwrap();
}

#[test]
fn large_message_uses_rendezvous() {
    const LEN: usize = 10 * 1024 * 1024;
    run_local(2, TransportKind::Tcp, &opts(), |job| {
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        let w = rt.world();
        if rt.rank() == 0 {
            let r = rt.isend(pattern(LEN, 1), 1, 9, &w).unwrap();
            // nothing is transferred until a clear-to-send is processed
            assert_ne!(r.phase(), Phase::Complete);
            let st = rt.wait(&r).unwrap();
            assert_eq!(st.received_bytes, LEN);
        } else {
            let (st, data) = rt.recv(LEN, 0usize, 9, &w).unwrap();
            assert_eq!(st.received_bytes, LEN);
            assert_eq!(&data[..], &pattern(LEN, 1)[..]);
        }
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn self_send_completes_in_either_wait_order() {
    for len in [100usize, 1 << 20] {
        for send_first in [true, false] {
            let job = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
            let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
            let w = rt.world();
            let s = rt.isend(pattern(len, 7), 0, 1, &w).unwrap();
            let r = rt.irecv(len, 0usize, 1, &w).unwrap();
            if send_first {
                rt.wait(&s).unwrap();
                rt.wait(&r).unwrap();
            } else {
                rt.wait(&r).unwrap();
                rt.wait(&s).unwrap();
            }
            assert_eq!(&r.take_data().unwrap()[..], &pattern(len, 7)[..]);
            rt.finalize().unwrap();
        }
    }
}

#[test]
fn receive_posted_before_or_after_arrival() {
    run_local(2, TransportKind::Channel, &opts(), |job| {
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        let w = rt.world();
        if rt.rank() == 0 {
            rt.send(vec![1u8; 10], 1, 1, &w).unwrap();
            rt.recv(0, 1usize, 99, &w).unwrap();
            rt.send(vec![2u8; 10], 1, 2, &w).unwrap();
        } else {
            let early = rt.irecv(10, 0usize, 1, &w).unwrap();
            rt.send(Vec::new(), 0, 99, &w).unwrap();
            rt.wait(&early).unwrap();
            // let the second message land in the unexpected queue first
            while rt.diagnostics().unexpected_len == 0 {
                rt.progress().unwrap();
                thread::sleep(Duration::from_millis(1));
            }
            let (_, d) = rt.recv(10, 0usize, 2, &w).unwrap();
            assert_eq!(&d[..], &[2u8; 10]);
        }
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn wildcard_status_names_actual_sender() {
    run_local(3, TransportKind::Channel, &opts(), |job| {
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        let w = rt.world();
        if rt.rank() == 0 {
            let mut seen = Vec::new();
            for _ in 0..2 {
                let (st, d) = rt.recv(8, Source::Any, TagMatch::Any, &w).unwrap();
                assert_eq!(d[0] as i32, st.source);
                assert_eq!(st.tag, 10 + st.source);
                seen.push(st.source);
            }
            seen.sort();
            assert_eq!(seen, vec![1, 2]);
        } else {
            let me = rt.rank();
            rt.send(vec![me as u8], 0, 10 + me as i32, &w).unwrap();
        }
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn short_buffer_truncates() {
    for len in [64usize, 512 * 1024] {
        let job = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        let w = rt.world();
        let s = rt.isend(pattern(len, 0), 0, 0, &w).unwrap();
        let r = rt.irecv(len / 2, 0usize, 0, &w).unwrap();
        let st = rt.wait(&r).unwrap();
        assert_eq!(st.error, StatusError::Truncated);
        assert_eq!(st.received_bytes, len / 2);
        assert_eq!(r.phase(), Phase::Errored);
        assert!(rt.wait(&s).unwrap().is_ok());
        rt.finalize().unwrap();
    }
}

#[test]
fn invalid_arguments_are_usage_errors() {
    let job = local_jobs(2, TransportKind::Channel, &opts()).unwrap().remove(0);
    // a second rank never joins; we only test argument checks
    let handle = thread::spawn(move || {
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        let w = rt.world();
        assert!(rt.isend(vec![1], 5, 0, &w).unwrap_err().is_usage());
        assert!(rt.isend(vec![1], 1, -1, &w).unwrap_err().is_usage());
        assert!(rt.irecv(1, 7usize, 0, &w).unwrap_err().is_usage());
    });
    handle.join().unwrap();
}

#[test]
fn wait_any_returns_completing_send() {
    run_local(2, TransportKind::Channel, &opts(), |job| {
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        let w = rt.world();
        if rt.rank() == 0 {
            let never = rt.irecv(8, 1usize, 77, &w).unwrap();
            let send = rt.isend(vec![0u8; 8], 1, 1, &w).unwrap();
            let (i, st) = rt.wait_any(&[never.clone(), send]).unwrap();
            assert_eq!(i, 1);
            assert!(st.is_ok());
            // release the receive so finalize is legal
            rt.send(Vec::new(), 1, 2, &w).unwrap();
            rt.wait(&never).unwrap();
        } else {
            rt.recv(8, 0usize, 1, &w).unwrap();
            rt.recv(0, 0usize, 2, &w).unwrap();
            rt.send(vec![0u8; 8], 0, 77, &w).unwrap();
        }
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn consumed_request_cannot_be_waited_again() {
    let job = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
    let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
    let w = rt.world();
    let s = rt.isend(vec![1], 0, 0, &w).unwrap();
    rt.wait(&s).unwrap();
    assert!(rt.wait(&s).unwrap_err().is_usage());
    assert!(rt.test(&s).unwrap_err().is_usage());
    rt.recv(1, 0usize, 0, &w).unwrap();
    rt.finalize().unwrap();
}

#[test]
fn finalize_rejects_pending_receive_and_later_calls() {
    let job = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
    let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
    let w = rt.world();
    let r = rt.irecv(4, 0usize, 0, &w).unwrap();
    let err = rt.finalize().unwrap_err();
    assert!(err.is_usage());
    assert!(err.to_string().contains(&r.id().to_string()));
    rt.send(vec![1, 2, 3, 4], 0, 0, &w).unwrap();
    rt.wait(&r).unwrap();
    rt.finalize().unwrap();
    assert!(rt.isend(vec![1], 0, 0, &w).unwrap_err().is_usage());
    assert!(rt.finalize().unwrap_err().is_usage());
}

#[test]
fn concurrent_finalize_does_not_deadlock() {
    run_local(2, TransportKind::Tcp, &opts(), |job| {
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn pending_request_completes_by_test_calls_alone() {
    const LEN: usize = 1 << 20;
    run_local(2, TransportKind::Channel, &opts(), |job| {
        let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
        let w = rt.world();
        let req = if rt.rank() == 0 {
            rt.isend(vec![5u8; LEN], 1, 0, &w).unwrap()
        } else {
            rt.irecv(LEN, 0usize, 0, &w).unwrap()
        };
        let mut polls = 0u64;
        loop {
            polls += 1;
            if rt.test(&req).unwrap().is_some() {
                break;
            }
            assert!(polls < 5_000_000, "request did not complete by polling");
            thread::yield_now();
        }
        assert!(rt.diagnostics().progress_calls >= polls);
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn many_threads_lose_no_messages() {
    const THREADS: usize = 8;
    const PER_THREAD: usize = 200;
    run_local(2, TransportKind::Tcp, &opts(), |job| {
        let rt = Arc::new(Runtime::init(job, ThreadLevel::Multiple).unwrap());
        let w = rt.world();
        let handles: Vec<_> = (0..THREADS)
            .map(|t| {
                let rt = rt.clone();
                let w = w.clone();
                thread::spawn(move || {
                    let peer = 1 - rt.rank();
                    let mut total = 0usize;
                    for i in 0..PER_THREAD {
                        // mix eager and rendezvous sizes
                        let len = if i % 25 == 0 { 300 * 1024 } else { 64 };
                        let s = rt.isend(vec![t as u8; len], peer, t as i32, &w).unwrap();
                        let r = rt.irecv(len, peer, t as i32, &w).unwrap();
                        rt.wait(&s).unwrap();
                        let st = rt.wait(&r).unwrap();
                        assert!(r.take_data().unwrap().iter().all(|&b| b == t as u8));
                        total += st.received_bytes;
                    }
                    total
                })
            })
            .collect();
        let total: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
        let expected = THREADS * (PER_THREAD / 25 * 300 * 1024 + (PER_THREAD - PER_THREAD / 25) * 64);
        assert_eq!(total, expected);
        rt.finalize().unwrap();
    })
    .unwrap();
}

#[test]
fn requests_record_their_kind_and_submitter() {
    let job = local_jobs(1, TransportKind::Channel, &opts()).unwrap().remove(0);
    let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
    let w = rt.world();
    let s = rt.isend(vec![1], 0, 0, &w).unwrap();
    let r = rt.irecv(1, 0usize, 0, &w).unwrap();
    assert_eq!(s.kind(), RequestKind::Send);
    assert_eq!(r.kind(), RequestKind::Recv);
    assert_eq!(s.submitter(), thread::current().id());
    rt.wait_all(&[s, r]).unwrap();
    rt.finalize().unwrap();
}

#[test]
fn unexpected_queue_overflow_is_fatal() {
    let o = RuntimeOptions { unexpected_cap: 1000, ..opts() };
    let job = local_jobs(1, TransportKind::Channel, &o).unwrap().remove(0);
    let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
    let w = rt.world();
    for _ in 0..3 {
        rt.isend(vec![0u8; 400], 0, 0, &w).unwrap();
    }
    let mut err = None;
    for _ in 0..1000 {
        if let Err(e) = rt.progress() {
            err = Some(e);
            break;
        }
        thread::sleep(Duration::from_millis(1));
    }
    let e = err.expect("overflow must surface");
    assert!(e.to_string().contains("exceeded 1000"), "{e}");
}
