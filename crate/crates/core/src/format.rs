//! Line-delimited text encoding of [`WorkerTrace`].
//!
//! ```text
//! dltsim-trace v1 rank=<r> host=<h> device=<d>
//! <seq> HostGap ns=<n>
//! <seq> KernelLaunch stream=<s> op=<op_kind> dtype=<dt> flops=<f> bytes=<b> attrs=<k>:<v>,...
//! <seq> MemAlloc id=<a> bytes=<b>
//! <seq> MemFree id=<a>
//! <seq> Memcpy stream=<s> dir=<H2D|D2H|D2D> bytes=<b>
//! <seq> Memset stream=<s> bytes=<b>
//! <seq> EventRecord stream=<s> event=<e> version=<v>
//! <seq> StreamWaitEvent stream=<s> event=<e> version=<v>
//! <seq> EventSynchronize event=<e> version=<v>
//! <seq> StreamSynchronize stream=<s>
//! <seq> DeviceSynchronize
//! <seq> CommInit comm=<c> nranks=<n> rank=<r>
//! <seq> Collective stream=<s> comm=<c> idx=<i> kind=<kind> bytes=<b> nranks=<n>
//! ```
//!
//! Keys appear in exactly this order. `attrs` is sorted by key and may be
//! empty (`attrs=`).

use alloc::format;
use alloc::string::{String, ToString};
use core::fmt::{self, Write};
use core::str::SplitAsciiWhitespace;

use thiserror::Error;

use crate::trace::*;

pub const HEADER_MAGIC: &str = "dltsim-trace";
pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("invalid trace: {0}")]
    Invalid(Violation),
}

pub fn write_header<W: Write>(out: &mut W, trace: &WorkerTrace) -> fmt::Result {
    writeln!(
        out,
        "{HEADER_MAGIC} {SCHEMA_VERSION} rank={} host={} device={}",
        trace.global_rank, trace.host_index, trace.device_index
    )
}

pub fn write_event<W: Write>(out: &mut W, ev: &TraceEvent) -> fmt::Result {
    write!(out, "{} {}", ev.seq, ev.kind.tag())?;
    match &ev.kind {
        EventKind::HostGap { duration } => write!(out, " ns={duration}")?,
        EventKind::KernelLaunch(k) => {
            write!(
                out,
                " stream={} op={} dtype={} flops={} bytes={} attrs=",
                k.stream.0,
                k.op_kind,
                k.dtype.name(),
                k.flop_count,
                k.bytes_moved
            )?;
            for (i, (key, val)) in k.attrs.iter().enumerate() {
                if i > 0 {
                    out.write_char(',')?;
                }
                write!(out, "{key}:{val}")?;
            }
        }
        EventKind::MemAlloc { alloc, bytes } => write!(out, " id={} bytes={bytes}", alloc.0)?,
        EventKind::MemFree { alloc } => write!(out, " id={}", alloc.0)?,
        EventKind::Memcpy {
            stream,
            direction,
            bytes,
        } => write!(
            out,
            " stream={} dir={} bytes={bytes}",
            stream.0,
            direction.name()
        )?,
        EventKind::Memset { stream, bytes } => write!(out, " stream={} bytes={bytes}", stream.0)?,
        EventKind::EventRecord {
            stream,
            event,
            version,
        }
        | EventKind::StreamWaitEvent {
            stream,
            event,
            version,
        } => write!(
            out,
            " stream={} event={} version={version}",
            stream.0, event.0
        )?,
        EventKind::EventSynchronize { event, version } => {
            write!(out, " event={} version={version}", event.0)?
        }
        EventKind::StreamSynchronize { stream } => write!(out, " stream={}", stream.0)?,
        EventKind::DeviceSynchronize => {}
        EventKind::CommInit {
            comm,
            nranks,
            my_rank,
        } => write!(out, " comm={} nranks={nranks} rank={my_rank}", comm.0)?,
        EventKind::Collective {
            stream,
            comm,
            call_idx,
            kind,
            bytes,
            nranks,
        } => write!(
            out,
            " stream={} comm={} idx={call_idx} kind={} bytes={bytes} nranks={nranks}",
            stream.0,
            comm.0,
            kind.name()
        )?,
    }
    out.write_char('\n')
}

/// Encodes a whole trace into a string (header plus one line per event).
pub fn encode_trace(trace: &WorkerTrace) -> String {
    let mut s = String::new();
    // Writing into a String cannot fail.
    let _ = write_header(&mut s, trace);
    for ev in &trace.events {
        let _ = write_event(&mut s, ev);
    }
    s
}

struct Fields<'a> {
    it: SplitAsciiWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn value(&mut self, key: &str) -> Result<&'a str, String> {
        let tok = self
            .it
            .next()
            .ok_or_else(|| format!("missing field `{key}`"))?;
        match tok.split_once('=') {
            Some((k, v)) if k == key => Ok(v),
            _ => Err(format!("expected `{key}=...`, found `{tok}`")),
        }
    }

    fn num<T: core::str::FromStr>(&mut self, key: &str) -> Result<T, String> {
        let v = self.value(key)?;
        v.parse()
            .map_err(|_| format!("field `{key}`: `{v}` is not a valid number"))
    }

    fn done(mut self) -> Result<(), String> {
        match self.it.next() {
            None => Ok(()),
            Some(extra) => Err(format!("unexpected trailing field `{extra}`")),
        }
    }
}

/// Parses the header line, returning `(rank, host, device)`.
pub fn parse_header(line: &str) -> Result<(u32, u32, u32), String> {
    let mut it = line.split_ascii_whitespace();
    if it.next() != Some(HEADER_MAGIC) {
        return Err(format!("missing `{HEADER_MAGIC}` header"));
    }
    match it.next() {
        Some(SCHEMA_VERSION) => {}
        Some(other) => return Err(format!("unsupported schema version `{other}`")),
        None => return Err("missing schema version".into()),
    }
    let mut f = Fields { it };
    let rank = f.num("rank")?;
    let host = f.num("host")?;
    let device = f.num("device")?;
    f.done()?;
    Ok((rank, host, device))
}

fn parse_attrs(s: &str) -> Result<Attrs, String> {
    let mut attrs = Attrs::new();
    if s.is_empty() {
        return Ok(attrs);
    }
    for item in s.split(',') {
        let (k, v) = item
            .split_once(':')
            .ok_or_else(|| format!("attr `{item}` is not key:value"))?;
        let v: u64 = v
            .parse()
            .map_err(|_| format!("attr `{k}`: `{v}` is not a valid number"))?;
        if attrs.insert(k.to_string(), v).is_some() {
            return Err(format!("attr `{k}` repeated"));
        }
    }
    Ok(attrs)
}

/// Parses one event line.
pub fn parse_event(line: &str) -> Result<TraceEvent, String> {
    let mut it = line.split_ascii_whitespace();
    let seq_tok = it.next().ok_or("empty line")?;
    let seq: u64 = seq_tok
        .parse()
        .map_err(|_| format!("`{seq_tok}` is not a sequence number"))?;
    let tag = it.next().ok_or("missing event kind")?;
    let mut f = Fields { it };
    let stream = |f: &mut Fields| f.num::<u32>("stream").map(StreamId);
    let kind = match tag {
        "HostGap" => EventKind::HostGap {
            duration: f.num("ns")?,
        },
        "KernelLaunch" => {
            let stream = stream(&mut f)?;
            let op_kind = f.value("op")?.to_string();
            let dt = f.value("dtype")?;
            let dtype = Dtype::from_name(dt).ok_or_else(|| format!("unknown dtype `{dt}`"))?;
            let flop_count = f.num("flops")?;
            let bytes_moved = f.num("bytes")?;
            let attrs = parse_attrs(f.value("attrs")?)?;
            EventKind::KernelLaunch(Kernel {
                stream,
                op_kind,
                dtype,
                flop_count,
                bytes_moved,
                attrs,
            })
        }
        "MemAlloc" => EventKind::MemAlloc {
            alloc: AllocId(f.num("id")?),
            bytes: f.num("bytes")?,
        },
        "MemFree" => EventKind::MemFree {
            alloc: AllocId(f.num("id")?),
        },
        "Memcpy" => {
            let stream = stream(&mut f)?;
            let d = f.value("dir")?;
            let direction = CopyDirection::from_name(d)
                .ok_or_else(|| format!("unknown copy direction `{d}`"))?;
            EventKind::Memcpy {
                stream,
                direction,
                bytes: f.num("bytes")?,
            }
        }
        "Memset" => EventKind::Memset {
            stream: stream(&mut f)?,
            bytes: f.num("bytes")?,
        },
        "EventRecord" => EventKind::EventRecord {
            stream: stream(&mut f)?,
            event: EventId(f.num("event")?),
            version: f.num("version")?,
        },
        "StreamWaitEvent" => EventKind::StreamWaitEvent {
            stream: stream(&mut f)?,
            event: EventId(f.num("event")?),
            version: f.num("version")?,
        },
        "EventSynchronize" => EventKind::EventSynchronize {
            event: EventId(f.num("event")?),
            version: f.num("version")?,
        },
        "StreamSynchronize" => EventKind::StreamSynchronize {
            stream: stream(&mut f)?,
        },
        "DeviceSynchronize" => EventKind::DeviceSynchronize,
        "CommInit" => EventKind::CommInit {
            comm: CommId(f.num("comm")?),
            nranks: f.num("nranks")?,
            my_rank: f.num("rank")?,
        },
        "Collective" => {
            let stream = stream(&mut f)?;
            let comm = CommId(f.num("comm")?);
            let call_idx = f.num("idx")?;
            let k = f.value("kind")?;
            let kind =
                CollectiveKind::from_name(k).ok_or_else(|| format!("unknown collective `{k}`"))?;
            EventKind::Collective {
                stream,
                comm,
                call_idx,
                kind,
                bytes: f.num("bytes")?,
                nranks: f.num("nranks")?,
            }
        }
        other => return Err(format!("unknown event kind `{other}`")),
    };
    f.done()?;
    Ok(TraceEvent { seq, kind })
}

/// Incremental decoder: feed lines in order, then [`TraceDecoder::finish`]
/// validates the whole trace.
#[derive(Debug, Default)]
pub struct TraceDecoder {
    trace: Option<WorkerTrace>,
    lines: usize,
}

impl TraceDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_line(&mut self, line: &str) -> Result<(), TraceError> {
        self.lines += 1;
        let line_no = self.lines;
        let line = line.trim_end_matches(['\n', '\r']);
        let malformed = |message: String| TraceError::Malformed {
            line: line_no,
            message,
        };
        match &mut self.trace {
            None => {
                let (rank, host, device) = parse_header(line).map_err(malformed)?;
                self.trace = Some(WorkerTrace::new(rank, host, device));
            }
            Some(t) => {
                let ev = parse_event(line).map_err(malformed)?;
                t.events.push(ev);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<WorkerTrace, TraceError> {
        let trace = self.trace.ok_or(TraceError::Malformed {
            line: 1,
            message: "missing header line".into(),
        })?;
        if let Some(v) = validate_trace(&trace).into_iter().next() {
            return Err(TraceError::Invalid(v));
        }
        Ok(trace)
    }
}

/// Parses and validates a complete trace held in memory.
pub fn decode_trace(text: &str) -> Result<WorkerTrace, TraceError> {
    let mut dec = TraceDecoder::new();
    for line in text.lines() {
        dec.push_line(line)?;
    }
    dec.finish()
}
