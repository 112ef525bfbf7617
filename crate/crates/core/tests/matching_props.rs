//! Matching on a live two-rank job against a serial reference matcher.

use std::thread;
use std::time::Duration;

use apr_core::job::{run_local, TransportKind};
use apr_core::{Runtime, RuntimeOptions, Source, TagMatch, ThreadLevel};
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
struct Recv {
    any_source: bool,
    tag: Option<i32>,
}

/// Receives take, in posting order, the earliest unclaimed message they
/// accept. Returns the matched message index per receive.
fn reference(tags: &[i32], recvs: &[Recv]) -> Vec<Option<usize>> {
    let mut claimed = vec![false; tags.len()];
    recvs
        .iter()
        .map(|r| {
            let i = (0..tags.len()).find(|&i| !claimed[i] && r.tag.is_none_or(|t| t == tags[i]))?;
            claimed[i] = true;
            Some(i)
        })
        .collect()
}

fn recv_strategy() -> impl Strategy<Value = Recv> {
    (any::<bool>(), prop_oneof![Just(None), (0i32..3).prop_map(Some)])
        .prop_map(|(any_source, tag)| Recv { any_source, tag })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn live_matching_agrees_with_reference(
        tags in proptest::collection::vec(0i32..3, 1..30),
        recvs in proptest::collection::vec(recv_strategy(), 1..30),
        delays in proptest::collection::vec(0u64..300, 60),
    ) {
        let expected = reference(&tags, &recvs);
        // receives the reference leaves unmatched would never complete
        let live: Vec<(Recv, usize)> =
            recvs.iter().zip(&expected).filter_map(|(r, m)| m.map(|m| (*r, m))).collect();
        let (tags2, live2, delays2) = (tags.clone(), live.clone(), delays.clone());
        let out = run_local(2, TransportKind::Channel, &RuntimeOptions::default(), move |job| {
            let rt = Runtime::init(job, ThreadLevel::Multiple).unwrap();
            let w = rt.world();
            let mut got = Vec::new();
            if rt.rank() == 0 {
                let mut reqs = Vec::new();
                for (i, &t) in tags2.iter().enumerate() {
                    reqs.push(rt.isend((i as u32).to_le_bytes().to_vec(), 1, t, &w).unwrap());
                    thread::sleep(Duration::from_micros(delays2[i % delays2.len()]));
                }
                rt.wait_all(&reqs).unwrap();
            } else {
                let mut reqs = Vec::new();
                for (k, (r, _)) in live2.iter().enumerate() {
                    let src = if r.any_source { Source::Any } else { Source::Rank(0) };
                    let tag = r.tag.map_or(TagMatch::Any, TagMatch::Tag);
                    reqs.push(rt.irecv(4, src, tag, &w).unwrap());
                    thread::sleep(Duration::from_micros(delays2[(k + 30) % delays2.len()]));
                }
                for r in &reqs {
                    let st = rt.wait(r).unwrap();
                    let idx = u32::from_le_bytes(r.take_data().unwrap()[..].try_into().unwrap()) as usize;
                    assert_eq!(st.tag, tags2[idx]);
                    assert_eq!(st.source, 0);
                    got.push(idx);
                }
            }
            rt.finalize().unwrap();
            got
        })
        .unwrap();
        let want: Vec<usize> = live.iter().map(|(_, m)| *m).collect();
        prop_assert_eq!(&out[1], &want);
    }
}
