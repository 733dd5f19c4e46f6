mod common;

use common::event;
use proptest::prelude::*;
use syscall_novelty::trace::{
    delimit_requests, read_event_file, read_requests, write_event_file, write_requests, MarkerEvent, MarkerKind,
    Request, TraceEvent,
};

fn marker(kind: MarkerKind, ts_ns: u64, tid: u32) -> TraceEvent {
    TraceEvent::Marker(MarkerEvent { kind, ts_ns, tid })
}

fn sys(name: &str, ts: u64, tid: u32) -> TraceEvent {
    TraceEvent::Syscall(event(name, ts, tid))
}

fn timestamps() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0u64..1_000_000_000, 1..64).prop_map(|gaps| {
        gaps.iter()
            .scan(0u64, |t, g| {
                *t += g;
                Some(*t)
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn deltas_telescope_to_the_span(ts in timestamps()) {
        let events = ts.iter().map(|&t| event("read", t, 1)).collect();
        let r = Request::new(events, "id", 0);
        prop_assert_eq!(r.deltas_ns[0], 0);
        prop_assert_eq!(r.deltas_ns.iter().sum::<u64>(), ts[ts.len() - 1] - ts[0]);
        for i in 1..ts.len() {
            prop_assert_eq!(r.deltas_ns[i], ts[i] - ts[i - 1]);
        }
    }

    #[test]
    fn truncation_keeps_a_prefix(ts in timestamps(), max_len in 1usize..80) {
        let events: Vec<_> = ts.iter().map(|&t| event("read", t, 1)).collect();
        let full = Request::new(events, "id", 0);
        let cut = full.clone().truncate(max_len);
        prop_assert_eq!(cut.len(), full.len().min(max_len));
        prop_assert_eq!(&cut.events[..], &full.events[..cut.len()]);
        prop_assert_eq!(&cut.deltas_ns[..], &full.deltas_ns[..cut.len()]);
    }

    #[test]
    fn request_files_round_trip(
        reqs in prop::collection::vec(
            (timestamps(), prop::sample::select(vec!["read", "write", "open"]), 1u32..5, 0u64..1_000_000),
            0..8,
        )
    ) {
        let requests: Vec<Request> = reqs
            .iter()
            .map(|(ts, name, tid, dur)| {
                Request::new(ts.iter().map(|&t| event(name, t, *tid)).collect(), "latency", *dur)
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_requests(&path, &requests).unwrap();
        prop_assert_eq!(read_requests(&path).unwrap(), requests);
    }

    #[test]
    fn event_files_round_trip(ts in timestamps()) {
        let mut stream = vec![marker(MarkerKind::RequestEnter, ts[0], 7)];
        stream.extend(ts.iter().map(|&t| sys("poll", t, 7)));
        stream.push(marker(MarkerKind::RequestExit, ts[ts.len() - 1], 7));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        write_event_file(&path, &stream).unwrap();
        let back = read_event_file(&path).unwrap();
        prop_assert_eq!(&back, &stream);
        let d = delimit_requests(&back, "id").unwrap();
        prop_assert_eq!(d.requests.len(), 1);
        prop_assert_eq!(d.requests[0].len(), ts.len());
    }
}

#[test]
fn markers_pair_within_their_own_thread() {
    // Requests on tids 1 and 2 overlap; the exit on tid 2 must not close
    // the request opened first on tid 1.
    let stream = vec![
        marker(MarkerKind::RequestEnter, 10, 1),
        sys("read", 11, 1),
        marker(MarkerKind::RequestEnter, 12, 2),
        sys("write", 13, 2),
        marker(MarkerKind::RequestExit, 14, 2),
        sys("close", 15, 1),
        marker(MarkerKind::RequestExit, 16, 1),
    ];
    let d = delimit_requests(&stream, "id").unwrap();
    let names: Vec<Vec<&str>> = d.requests.iter().map(|r| r.names().collect()).collect();
    assert_eq!(names, vec![vec!["read", "write", "close"], vec!["write"]]);
    assert_eq!(d.requests[0].duration_ns, 6);
    assert_eq!(d.requests[1].duration_ns, 2);
}

#[test]
fn repeated_requests_on_one_thread_pair_in_order() {
    let stream = vec![
        marker(MarkerKind::RequestEnter, 0, 3),
        marker(MarkerKind::RequestEnter, 1, 3),
        sys("read", 2, 3),
        marker(MarkerKind::RequestExit, 3, 3),
        sys("write", 4, 3),
        marker(MarkerKind::RequestExit, 5, 3),
    ];
    let d = delimit_requests(&stream, "id").unwrap();
    // FIFO: the first enter (ts 0) closes at ts 3, the second at ts 5.
    assert_eq!(d.requests[0].names().collect::<Vec<_>>(), ["read"]);
    assert_eq!(d.requests[1].names().collect::<Vec<_>>(), ["read", "write"]);
    assert_eq!(d.dropped_unmatched, 0);
}
