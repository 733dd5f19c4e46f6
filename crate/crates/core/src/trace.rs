//! Event streams, request delimiting and the on-disk trace formats.
//!
//! Raw traces are JSON Lines files with one kernel event per line. Two
//! marker events (`request_enter`, `request_exit`) bracket each request;
//! every system call that falls inside a bracket belongs to that request,
//! whichever thread emitted it. Overlapping requests therefore share
//! events.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REQUEST_ENTER: &str = "request_enter";
pub const REQUEST_EXIT: &str = "request_exit";

/// Name of the request file inside every split directory.
pub const SPLIT_FILE: &str = "requests.jsonl";

/// Truncation length used for long requests.
pub const DEFAULT_MAX_LEN: usize = 2048;

/// One kernel system-call event.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyscallEvent {
    #[serde(rename = "ts")]
    pub ts_ns: u64,
    pub name: String,
    pub ret: i64,
    #[serde(rename = "proc")]
    pub procname: String,
    pub tid: u32,
    pub pid: u32,
    pub entry: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarkerKind {
    RequestEnter,
    RequestExit,
}

impl MarkerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MarkerKind::RequestEnter => REQUEST_ENTER,
            MarkerKind::RequestExit => REQUEST_EXIT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerEvent {
    pub kind: MarkerKind,
    pub ts_ns: u64,
    pub tid: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceEvent {
    Syscall(SyscallEvent),
    Marker(MarkerEvent),
}

impl TraceEvent {
    pub fn ts_ns(&self) -> u64 {
        match self {
            TraceEvent::Syscall(e) => e.ts_ns,
            TraceEvent::Marker(m) => m.ts_ns,
        }
    }

    /// Serializes the event as one line of the event file format.
    pub fn to_line(&self) -> String {
        match self {
            TraceEvent::Syscall(e) => serde_json::to_string(e).expect("syscall event serializes"),
            TraceEvent::Marker(m) => serde_json::to_string(&MarkerRecord {
                ts: m.ts_ns,
                name: m.kind.as_str(),
                tid: m.tid,
            })
            .expect("marker serializes"),
        }
    }
}

#[derive(Serialize)]
struct MarkerRecord<'a> {
    ts: u64,
    name: &'a str,
    tid: u32,
}

// Every key optional so that missing fields can be reported per event kind.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    ts: Option<u64>,
    name: Option<String>,
    ret: Option<i64>,
    #[serde(rename = "proc")]
    procname: Option<String>,
    tid: Option<u32>,
    pid: Option<u32>,
    entry: Option<bool>,
}

/// Parses one record of the event file. `line_no` is 1-based and only used
/// in error messages.
pub fn parse_event_line(line: &str, line_no: usize) -> Result<TraceEvent> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let missing = |key: &str| err(format!("missing field `{key}`"));

    let ts_ns = raw.ts.ok_or_else(|| missing("ts"))?;
    let name = raw.name.ok_or_else(|| missing("name"))?;
    let tid = raw.tid.ok_or_else(|| missing("tid"))?;

    let kind = match name.as_str() {
        REQUEST_ENTER => Some(MarkerKind::RequestEnter),
        REQUEST_EXIT => Some(MarkerKind::RequestExit),
        _ => None,
    };
    if let Some(kind) = kind {
        if raw.ret.is_some() || raw.procname.is_some() || raw.pid.is_some() || raw.entry.is_some()
        {
            return Err(err(format!("marker `{name}` carries syscall fields")));
        }
        return Ok(TraceEvent::Marker(MarkerEvent { kind, ts_ns, tid }));
    }

    if name.is_empty() {
        return Err(err("empty syscall name".into()));
    }
    let procname = raw.procname.ok_or_else(|| missing("proc"))?;
    if procname.is_empty() {
        return Err(err("empty process name".into()));
    }
    Ok(TraceEvent::Syscall(SyscallEvent {
        ts_ns,
        name,
        ret: raw.ret.ok_or_else(|| missing("ret"))?,
        procname,
        tid,
        pid: raw.pid.ok_or_else(|| missing("pid"))?,
        entry: raw.entry.ok_or_else(|| missing("entry"))?,
    }))
}

/// Reads a whole event file, skipping blank lines.
pub fn read_event_file(path: &Path) -> Result<Vec<TraceEvent>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(parse_event_line(&line, i + 1)?);
    }
    Ok(events)
}

pub fn write_event_file(path: &Path, events: &[TraceEvent]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ev in events {
        writeln!(w, "{}", ev.to_line()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// An ordered run of system calls between two request markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub events: Vec<SyscallEvent>,
    /// Elapsed time since the previous event; the first entry is always 0.
    pub deltas_ns: Vec<u64>,
    pub label: String,
    pub duration_ns: u64,
}

impl Request {
    /// Builds a request, sorting events by timestamp (stable) and deriving
    /// the elapsed times.
    pub fn new(mut events: Vec<SyscallEvent>, label: impl Into<String>, duration_ns: u64) -> Self {
        events.sort_by_key(|e| e.ts_ns);
        let mut req = Request {
            events,
            deltas_ns: Vec::new(),
            label: label.into(),
            duration_ns,
        };
        req.compute_deltas();
        req
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Fills `deltas_ns` from the event timestamps. Idempotent.
    pub fn compute_deltas(&mut self) {
        self.deltas_ns.clear();
        self.deltas_ns.reserve(self.events.len());
        let mut prev = None;
        for e in &self.events {
            let d = match prev {
                None => 0,
                Some(p) => e.ts_ns.saturating_sub(p),
            };
            self.deltas_ns.push(d);
            prev = Some(e.ts_ns);
        }
    }

    /// Keeps the first `max_len` events and their deltas.
    pub fn truncate(mut self, max_len: usize) -> Self {
        assert!(max_len >= 1, "max_len must be at least 1");
        self.events.truncate(max_len);
        self.deltas_ns.truncate(max_len);
        self
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.name.as_str())
    }
}

pub fn compute_deltas(mut request: Request) -> Request {
    request.compute_deltas();
    request
}

pub fn truncate_request(request: Request, max_len: usize) -> Request {
    request.truncate(max_len)
}

/// Result of delimiting an event stream.
#[derive(Debug, Clone, Default)]
pub struct Delimited {
    pub requests: Vec<Request>,
    /// Enter markers still open at the end of the stream.
    pub dropped_unmatched: usize,
}

/// Splits a time-ordered event stream into requests.
///
/// Enter and exit markers are paired per thread id in FIFO order. Each
/// request gets every system call with `enter.ts <= ts <= exit.ts`, from
/// any thread. Requests are returned in order of their enter marker.
pub fn delimit_requests(stream: &[TraceEvent], label: &str) -> Result<Delimited> {
    let mut syscalls: Vec<&SyscallEvent> = Vec::new();
    let mut open: HashMap<u32, VecDeque<(usize, u64)>> = HashMap::new();
    // (enter order, enter ts, exit ts)
    let mut intervals: Vec<(usize, u64, u64)> = Vec::new();
    let mut enters = 0usize;
    let mut last_ts = 0u64;

    for (i, ev) in stream.iter().enumerate() {
        let ts = ev.ts_ns();
        if ts < last_ts {
            return Err(Error::Stream(format!(
                "event {i} at ts {ts} precedes previous event at ts {last_ts}"
            )));
        }
        last_ts = ts;
        match ev {
            TraceEvent::Syscall(e) => syscalls.push(e),
            TraceEvent::Marker(m) => match m.kind {
                MarkerKind::RequestEnter => {
                    open.entry(m.tid).or_default().push_back((enters, m.ts_ns));
                    enters += 1;
                }
                MarkerKind::RequestExit => {
                    let (order, enter_ts) = open
                        .get_mut(&m.tid)
                        .and_then(VecDeque::pop_front)
                        .ok_or_else(|| {
                            Error::Stream(format!(
                                "request_exit at ts {} on tid {} has no matching request_enter",
                                m.ts_ns, m.tid
                            ))
                        })?;
                    intervals.push((order, enter_ts, m.ts_ns));
                }
            },
        }
    }

    let dropped_unmatched = open.values().map(VecDeque::len).sum();
    if dropped_unmatched > 0 {
        log::warn!("dropping {dropped_unmatched} request(s) without a request_exit");
    }

    intervals.sort_by_key(|&(order, _, _)| order);
    let requests = intervals
        .into_iter()
        .map(|(_, enter, exit)| {
            let lo = syscalls.partition_point(|e| e.ts_ns < enter);
            let hi = syscalls.partition_point(|e| e.ts_ns <= exit);
            let events = syscalls[lo..hi].iter().map(|e| (*e).clone()).collect();
            Request::new(events, label, exit - enter)
        })
        .collect();

    Ok(Delimited {
        requests,
        dropped_unmatched,
    })
}

#[derive(Serialize, Deserialize)]
struct RequestRecord {
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    duration_ns: Option<u64>,
    events: Vec<SyscallEvent>,
}

/// Reads a request dataset file (one JSON request per line).
pub fn read_requests(path: &Path) -> Result<Vec<Request>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RequestRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        let duration = rec.duration_ns.unwrap_or_else(|| {
            match (rec.events.first(), rec.events.last()) {
                (Some(a), Some(b)) => b.ts_ns.saturating_sub(a.ts_ns),
                _ => 0,
            }
        });
        out.push(Request::new(rec.events, rec.label, duration));
    }
    Ok(out)
}

pub fn write_requests(path: &Path, requests: &[Request]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in requests {
        let rec = RequestRecord {
            label: r.label.clone(),
            duration_ns: Some(r.duration_ns),
            events: r.events.clone(),
        };
        let line = serde_json::to_string(&rec).expect("request serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Path of the request file for `split` under a dataset root.
pub fn split_path(root: &Path, split: &str) -> PathBuf {
    root.join(split).join(SPLIT_FILE)
}

pub fn read_split(root: &Path, split: &str) -> Result<Vec<Request>> {
    read_requests(&split_path(root, split))
}

/// Names of all split directories under `root` that hold a request file,
/// sorted.
pub fn list_splits(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().join(SPLIT_FILE).is_file() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// Behaviors that have both validation and test splits, excluding `id`.
pub fn ood_behaviors(root: &Path) -> Result<Vec<String>> {
    let splits = list_splits(root)?;
    Ok(splits
        .iter()
        .filter_map(|s| s.strip_prefix("val_"))
        .filter(|b| *b != "id" && splits.iter().any(|s| s == &format!("test_{b}")))
        .map(str::to_owned)
        .collect())
}
