//! Device-API trace schema.
//!
//! A [`WorkerTrace`] is the ordered list of device interactions one worker
//! issued during a training iteration: kernel launches, memory operations,
//! cross-stream synchronisation, communicator setup and collectives, with
//! [`EventKind::HostGap`] entries carrying the host-side time between calls.
//! A host gap delays the event that follows it.
//!
//! Handles (streams, events, allocations) are worker-local small integers.
//! Communicator ids are the exception: they are globally unique, and the
//! collator relies on that to match collectives across workers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Nanos, Rank};

/// Worker-local stream handle. Stream 0 always exists; other handles are
/// created implicitly on first use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId(pub u32);

/// Worker-local device event handle (as passed to `cudaEventRecord`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventId(pub u32);

/// Globally unique communicator identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CommId(pub u64);

/// Worker-local allocation handle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AllocId(pub u64);

impl fmt::Display for CommId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Element type of a kernel's operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F16,
    Bf16,
    Fp8,
}

impl Dtype {
    pub const ALL: [Dtype; 4] = [Dtype::F32, Dtype::F16, Dtype::Bf16, Dtype::Fp8];

    pub fn size_bytes(self) -> u64 {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::Bf16 => 2,
            Dtype::Fp8 => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F16 => "f16",
            Dtype::Bf16 => "bf16",
            Dtype::Fp8 => "fp8",
        }
    }

    pub fn from_name(s: &str) -> Option<Dtype> {
        Dtype::ALL.into_iter().find(|d| d.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CopyDirection {
    H2D,
    D2H,
    D2D,
}

impl CopyDirection {
    pub fn name(self) -> &'static str {
        match self {
            CopyDirection::H2D => "H2D",
            CopyDirection::D2H => "D2H",
            CopyDirection::D2D => "D2D",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "H2D" => Some(CopyDirection::H2D),
            "D2H" => Some(CopyDirection::D2H),
            "D2D" => Some(CopyDirection::D2D),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CollectiveKind {
    AllReduce,
    AllGather,
    ReduceScatter,
    Broadcast,
    SendRecv,
}

impl CollectiveKind {
    pub const ALL: [CollectiveKind; 5] = [
        CollectiveKind::AllReduce,
        CollectiveKind::AllGather,
        CollectiveKind::ReduceScatter,
        CollectiveKind::Broadcast,
        CollectiveKind::SendRecv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllReduce => "AllReduce",
            CollectiveKind::AllGather => "AllGather",
            CollectiveKind::ReduceScatter => "ReduceScatter",
            CollectiveKind::Broadcast => "Broadcast",
            CollectiveKind::SendRecv => "SendRecv",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        CollectiveKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for CollectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named integer dimensions of a kernel (`m`, `n`, `k`, `elements`, ...).
pub type Attrs = BTreeMap<String, u64>;

/// A compute kernel launch.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Kernel {
    pub stream: StreamId,
    /// Symbolic kernel family, `<family>.<phase>` for frontend kernels
    /// (e.g. `gemm.fwd`, `softmax.bwd`).
    pub op_kind: String,
    pub dtype: Dtype,
    pub flop_count: u64,
    pub bytes_moved: u64,
    pub attrs: Attrs,
}

impl Kernel {
    /// Family part of `op_kind` (everything before the first `.`).
    pub fn family(&self) -> &str {
        op_family(&self.op_kind)
    }
}

pub fn op_family(op_kind: &str) -> &str {
    op_kind.split('.').next().unwrap_or(op_kind)
}

/// Kind-specific payload of a [`TraceEvent`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    HostGap {
        duration: Nanos,
    },
    KernelLaunch(Kernel),
    MemAlloc {
        alloc: AllocId,
        bytes: u64,
    },
    MemFree {
        alloc: AllocId,
    },
    Memcpy {
        stream: StreamId,
        direction: CopyDirection,
        bytes: u64,
    },
    Memset {
        stream: StreamId,
        bytes: u64,
    },
    EventRecord {
        stream: StreamId,
        event: EventId,
        version: u32,
    },
    StreamWaitEvent {
        stream: StreamId,
        event: EventId,
        version: u32,
    },
    EventSynchronize {
        event: EventId,
        version: u32,
    },
    StreamSynchronize {
        stream: StreamId,
    },
    DeviceSynchronize,
    CommInit {
        comm: CommId,
        nranks: u32,
        my_rank: u32,
    },
    Collective {
        stream: StreamId,
        comm: CommId,
        call_idx: u64,
        kind: CollectiveKind,
        bytes: u64,
        nranks: u32,
    },
}

impl EventKind {
    /// Token used in the text format and in diagnostics.
    pub fn tag(&self) -> &'static str {
        match self {
            EventKind::HostGap { .. } => "HostGap",
            EventKind::KernelLaunch(_) => "KernelLaunch",
            EventKind::MemAlloc { .. } => "MemAlloc",
            EventKind::MemFree { .. } => "MemFree",
            EventKind::Memcpy { .. } => "Memcpy",
            EventKind::Memset { .. } => "Memset",
            EventKind::EventRecord { .. } => "EventRecord",
            EventKind::StreamWaitEvent { .. } => "StreamWaitEvent",
            EventKind::EventSynchronize { .. } => "EventSynchronize",
            EventKind::StreamSynchronize { .. } => "StreamSynchronize",
            EventKind::DeviceSynchronize => "DeviceSynchronize",
            EventKind::CommInit { .. } => "CommInit",
            EventKind::Collective { .. } => "Collective",
        }
    }

    /// Stream the event executes on, for events that occupy a device stream.
    pub fn stream(&self) -> Option<StreamId> {
        match self {
            EventKind::KernelLaunch(k) => Some(k.stream),
            EventKind::Memcpy { stream, .. }
            | EventKind::Memset { stream, .. }
            | EventKind::EventRecord { stream, .. }
            | EventKind::StreamWaitEvent { stream, .. }
            | EventKind::Collective { stream, .. } => Some(*stream),
            _ => None,
        }
    }

    /// Whether the event needs a predicted runtime (kernels and copies).
    pub fn is_timed_device_op(&self) -> bool {
        matches!(
            self,
            EventKind::KernelLaunch(_) | EventKind::Memcpy { .. } | EventKind::Memset { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
}

/// Ordered per-worker event sequence plus the worker's placement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerTrace {
    pub global_rank: Rank,
    pub host_index: u32,
    pub device_index: u32,
    pub events: Vec<TraceEvent>,
}

impl WorkerTrace {
    pub fn new(global_rank: Rank, host_index: u32, device_index: u32) -> Self {
        WorkerTrace {
            global_rank,
            host_index,
            device_index,
            events: Vec::new(),
        }
    }

    /// Appends an event with the next sequence number.
    pub fn push(&mut self, kind: EventKind) {
        let seq = self.events.len() as u64;
        self.events.push(TraceEvent { seq, kind });
    }
}

/// Schema rule broken by a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rule {
    NonMonotoneSeq,
    SeqGap,
    NegativeOrEmptyField,
    MalformedName,
    WaitOnUnrecordedEvent,
    EventVersionOutOfOrder,
    CommRankOutOfRange,
    DuplicateCommInit,
    CollectiveOnUninitializedComm,
    CollectiveCallIdxOutOfOrder,
    CollectiveNranksMismatch,
    DuplicateAlloc,
    FreeOfUnallocated,
    DoubleFree,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::NonMonotoneSeq => "non-monotone seq",
            Rule::SeqGap => "seq gap",
            Rule::NegativeOrEmptyField => "zero-sized memory operation",
            Rule::MalformedName => "malformed name",
            Rule::WaitOnUnrecordedEvent => "wait on unrecorded event",
            Rule::EventVersionOutOfOrder => "event version out of order",
            Rule::CommRankOutOfRange => "communicator rank out of range",
            Rule::DuplicateCommInit => "duplicate communicator init",
            Rule::CollectiveOnUninitializedComm => "collective on uninitialized communicator",
            Rule::CollectiveCallIdxOutOfOrder => "collective call_idx out of order",
            Rule::CollectiveNranksMismatch => "collective nranks mismatch",
            Rule::DuplicateAlloc => "allocation of live handle",
            Rule::FreeOfUnallocated => "free of unallocated handle",
            Rule::DoubleFree => "double free",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub seq: u64,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq {}: {}: {}", self.seq, self.rule, self.message)
    }
}

/// A token usable inside the text format: nonempty, no whitespace, no `=`
/// or `,` or `:`.
pub fn is_valid_token(s: &str) -> bool {
    !s.is_empty()
        && !s
            .chars()
            .any(|c| c.is_whitespace() || c == '=' || c == ',' || c == ':')
}

/// Checks every schema invariant and returns the violations in trace order.
/// An empty result means the trace is well formed.
pub fn validate_trace(trace: &WorkerTrace) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut v = |seq: u64, rule: Rule, message: String| out.push(Violation { seq, rule, message });

    let mut recorded: BTreeSet<(EventId, u32)> = BTreeSet::new();
    let mut next_version: BTreeMap<EventId, u32> = BTreeMap::new();
    let mut comms: BTreeMap<CommId, u32> = BTreeMap::new();
    let mut next_call: BTreeMap<CommId, u64> = BTreeMap::new();
    let mut live: BTreeSet<AllocId> = BTreeSet::new();
    let mut freed: BTreeSet<AllocId> = BTreeSet::new();

    let mut prev_seq: Option<u64> = None;
    for ev in &trace.events {
        let seq = ev.seq;
        match prev_seq {
            None if seq != 0 => v(seq, Rule::SeqGap, format!("first seq is {seq}, expected 0")),
            Some(p) if seq <= p => v(
                seq,
                Rule::NonMonotoneSeq,
                format!("non-monotone seq: {p} then {seq}"),
            ),
            Some(p) if seq != p + 1 => v(seq, Rule::SeqGap, format!("seq jumps from {p} to {seq}")),
            _ => {}
        }
        prev_seq = Some(seq);

        match &ev.kind {
            EventKind::HostGap { .. } | EventKind::DeviceSynchronize => {}
            EventKind::StreamSynchronize { .. } => {}
            EventKind::KernelLaunch(k) => {
                if !is_valid_token(&k.op_kind) {
                    v(
                        seq,
                        Rule::MalformedName,
                        format!("op_kind {:?} is not a valid token", k.op_kind),
                    );
                }
                for key in k.attrs.keys() {
                    if !is_valid_token(key) {
                        v(
                            seq,
                            Rule::MalformedName,
                            format!("attr key {key:?} is not a valid token"),
                        );
                    }
                }
            }
            EventKind::MemAlloc { alloc, bytes } => {
                if *bytes == 0 {
                    v(
                        seq,
                        Rule::NegativeOrEmptyField,
                        "allocation of zero bytes".into(),
                    );
                }
                if !live.insert(*alloc) {
                    v(
                        seq,
                        Rule::DuplicateAlloc,
                        format!("alloc id {} is already live", alloc.0),
                    );
                }
                freed.remove(alloc);
            }
            EventKind::MemFree { alloc } => {
                if !live.remove(alloc) {
                    if freed.contains(alloc) {
                        v(
                            seq,
                            Rule::DoubleFree,
                            format!("alloc id {} was already freed", alloc.0),
                        );
                    } else {
                        v(
                            seq,
                            Rule::FreeOfUnallocated,
                            format!("free of unallocated handle {}", alloc.0),
                        );
                    }
                } else {
                    freed.insert(*alloc);
                }
            }
            EventKind::Memcpy { bytes, .. } | EventKind::Memset { bytes, .. } => {
                if *bytes == 0 {
                    v(seq, Rule::NegativeOrEmptyField, "copy of zero bytes".into());
                }
            }
            EventKind::EventRecord { event, version, .. } => {
                let expected = next_version.entry(*event).or_insert(0);
                if *version != *expected {
                    v(
                        seq,
                        Rule::EventVersionOutOfOrder,
                        format!(
                            "event {} recorded with version {version}, expected {expected}",
                            event.0
                        ),
                    );
                }
                *expected = version.saturating_add(1).max(*expected);
                recorded.insert((*event, *version));
            }
            EventKind::StreamWaitEvent { event, version, .. }
            | EventKind::EventSynchronize { event, version } => {
                if !recorded.contains(&(*event, *version)) {
                    v(
                        seq,
                        Rule::WaitOnUnrecordedEvent,
                        format!(
                            "{} on unrecorded event {} version {version}",
                            ev.kind.tag(),
                            event.0
                        ),
                    );
                }
            }
            EventKind::CommInit {
                comm,
                nranks,
                my_rank,
            } => {
                if *nranks == 0 || my_rank >= nranks {
                    v(
                        seq,
                        Rule::CommRankOutOfRange,
                        format!("comm {comm}: my_rank {my_rank} not in 0..{nranks}"),
                    );
                }
                if comms.insert(*comm, *nranks).is_some() {
                    v(
                        seq,
                        Rule::DuplicateCommInit,
                        format!("comm {comm} initialized twice"),
                    );
                }
            }
            EventKind::Collective {
                comm,
                call_idx,
                nranks,
                ..
            } => match comms.get(comm) {
                None => v(
                    seq,
                    Rule::CollectiveOnUninitializedComm,
                    format!("collective on comm {comm} which was never initialized"),
                ),
                Some(&declared) => {
                    if declared != *nranks {
                        v(
                            seq,
                            Rule::CollectiveNranksMismatch,
                            format!(
                                "comm {comm} has {declared} ranks but collective says {nranks}"
                            ),
                        );
                    }
                    let expected = next_call.entry(*comm).or_insert(0);
                    if *call_idx != *expected {
                        v(
                            seq,
                            Rule::CollectiveCallIdxOutOfOrder,
                            format!("comm {comm}: call_idx {call_idx}, expected {expected}"),
                        );
                    }
                    *expected = call_idx.saturating_add(1).max(*expected);
                }
            },
        }
    }
    out
}
