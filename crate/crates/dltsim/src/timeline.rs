//! Chrome trace-event export of a simulated timeline (load it in
//! `chrome://tracing` or Perfetto). Each rank is a process and each stream a
//! thread; every span becomes a begin/end pair.

use dltsim_core::sim::{SpanKind, TimelineSpan};
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Debug, Serialize)]
struct TraceEvent<'a> {
    name: &'a str,
    cat: &'static str,
    ph: &'static str,
    /// Microseconds.
    ts: f64,
    pid: u32,
    tid: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    args: Option<Value>,
}

fn category(k: SpanKind) -> &'static str {
    match k {
        SpanKind::Compute => "compute",
        SpanKind::Copy => "copy",
        SpanKind::CommWait => "comm_wait",
        SpanKind::Comm => "comm",
        SpanKind::EventWait => "event_wait",
    }
}

fn us(ns: u64) -> f64 {
    ns as f64 / 1000.0
}

/// Serializes spans as a Chrome trace JSON document.
pub fn chrome_trace(spans: &[TimelineSpan]) -> String {
    let mut meta: Vec<Value> = Vec::new();
    let mut seen: Vec<(u32, u32)> = spans.iter().map(|s| (s.rank, s.stream)).collect();
    seen.sort_unstable();
    seen.dedup();
    let mut last_rank = None;
    for &(rank, stream) in &seen {
        if last_rank != Some(rank) {
            meta.push(json!({"name": "process_name", "ph": "M", "pid": rank, "args": {"name": format!("rank {rank}")}}));
            meta.push(json!({"name": "process_sort_index", "ph": "M", "pid": rank, "args": {"sort_index": rank}}));
            last_rank = Some(rank);
        }
        meta.push(json!({"name": "thread_name", "ph": "M", "pid": rank, "tid": stream, "args": {"name": format!("stream {stream}")}}));
    }

    // (rank, stream, time, end-before-begin, span index)
    let mut marks: Vec<(u32, u32, u64, u8, usize)> = Vec::with_capacity(spans.len() * 2);
    for (i, s) in spans.iter().enumerate() {
        marks.push((s.rank, s.stream, s.start, 1, i));
        marks.push((s.rank, s.stream, s.end, 0, i));
    }
    marks.sort_unstable();
    let mut events: Vec<Value> = meta;
    for (_, _, t, begin, i) in marks {
        let s = &spans[i];
        let ev = TraceEvent {
            name: &s.name,
            cat: category(s.kind),
            ph: if begin == 1 { "B" } else { "E" },
            ts: us(t),
            pid: s.rank,
            tid: s.stream,
            args: (begin == 1).then(|| json!({"seq": s.seq})),
        };
        events.push(serde_json::to_value(ev).expect("event serializes"));
    }
    let doc = json!({"traceEvents": events, "displayTimeUnit": "ns"});
    let mut out = serde_json::to_string(&doc).expect("trace serializes");
    out.push('\n');
    out
}
