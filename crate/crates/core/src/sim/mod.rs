//! Discrete-event replay of an annotated job.
//!
//! Every worker has a host dispatch queue (its trace, replayed in order) and
//! one FIFO queue per device stream. Host gaps put the host to sleep; device
//! operations are appended to their stream's queue and start as soon as the
//! stream is free. Events are processed from a priority queue ordered by
//! `(time, insertion order)`, and every completion is followed by a
//! scheduling pass over the affected stream.
//!
//! Cross-stream dependencies:
//!
//! * `EventRecord` fires `(event, version)` when it reaches the head of its
//!   stream, releasing any stream or host waiting on it.
//! * `StreamWaitEvent` blocks its stream until the pair has fired.
//! * `EventSynchronize`, `StreamSynchronize` and `DeviceSynchronize` block
//!   the host until the event fires or the stream(s) drain.
//! * A collective blocks its stream until every member has arrived; all
//!   members then finish together, one wire time after the last arrival.
//!
//! Memory is accounted when the host replays an allocation, not when the
//! device would touch it. Exceeding capacity marks the report as OOM but the
//! replay continues.

mod report;

pub use report::{
    compute_mfu, DeviceReport, OomMarker, SimReport, SpanKind, StreamReport, TimelineSpan,
};

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Reverse;

use thiserror::Error;

use crate::cluster::ClusterSpec;
use crate::estimator::{memcpy_op_kind, AnnotatedJob};
use crate::trace::{AllocId, EventKind, StreamId};
use crate::{Nanos, Rank};
use report::{uncovered_len, union_len};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Record every operation's span for timeline export.
    pub timeline: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("deadlock at t={time}ns: {}", residue.join("; "))]
    Deadlock { time: Nanos, residue: Vec<String> },
    #[error("internal simulator error: {0}")]
    Internal(String),
}

/// Entry of the simulator's priority queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SimEvent {
    pub time: Nanos,
    pub tie_seq: u64,
    pub kind: SimEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SimEventKind {
    /// A host gap has elapsed; the worker's host continues dispatching.
    HostResume { worker: usize },
    /// A device operation completed.
    OpEnd {
        worker: usize,
        stream: usize,
        op: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HostState {
    Running,
    Sleeping,
    WaitEvent,
    WaitStream(usize),
    WaitDevice,
    Done,
}

#[derive(Debug, Clone, Copy)]
enum Waiter {
    Stream { stream: usize, since: Nanos },
    Host,
}

#[derive(Debug, Clone, Copy)]
enum Action {
    RunHost(usize),
    Schedule(usize, usize),
}

#[derive(Debug, Default)]
struct StreamState {
    queue: VecDeque<usize>,
    busy: bool,
    busy_ns: Nanos,
    stall_ns: Nanos,
}

impl StreamState {
    fn drained(&self) -> bool {
        !self.busy && self.queue.is_empty()
    }
}

/// Per-trace lookups shared by a representative and its duplicates.
#[derive(Debug)]
struct Prep {
    streams: Vec<StreamId>,
    /// Dense stream index of each event, `usize::MAX` for host-only events.
    op_stream: Vec<usize>,
}

impl Prep {
    fn new(trace: &crate::trace::WorkerTrace) -> Self {
        let mut streams: Vec<StreamId> = trace
            .events
            .iter()
            .filter_map(|e| e.kind.stream())
            .collect();
        streams.push(StreamId(0));
        streams.sort_unstable();
        streams.dedup();
        let op_stream = trace
            .events
            .iter()
            .map(|e| match e.kind.stream() {
                Some(s) => streams.binary_search(&s).expect("collected above"),
                None => usize::MAX,
            })
            .collect();
        Prep { streams, op_stream }
    }

    fn index(&self, s: StreamId) -> Option<usize> {
        self.streams.binary_search(&s).ok()
    }
}

#[derive(Debug)]
struct Worker {
    rank: Rank,
    host_index: u32,
    device_index: u32,
    trace: usize,
    pc: usize,
    host: HostState,
    streams: Vec<StreamState>,
    fired: BTreeSet<(u32, u32)>,
    live: BTreeMap<AllocId, u64>,
    allocated: u64,
    peak: u64,
    compute_busy: Nanos,
    comm_busy: Nanos,
    compute_iv: Vec<(Nanos, Nanos)>,
    comm_iv: Vec<(Nanos, Nanos)>,
    other_iv: Vec<(Nanos, Nanos)>,
}

struct Engine<'a> {
    job: &'a AnnotatedJob,
    capacity: u64,
    preps: Vec<Prep>,
    workers: Vec<Worker>,
    now: Nanos,
    tie: u64,
    heap: BinaryHeap<Reverse<SimEvent>>,
    pending: VecDeque<Action>,
    event_waits: BTreeMap<(usize, u32, u32), Vec<Waiter>>,
    arrivals: Vec<Vec<(usize, usize, usize, Nanos)>>,
    released: Vec<bool>,
    op_arrivals: u64,
    op_ends: u64,
    oom: Option<OomMarker>,
    timeline: Option<Vec<TimelineSpan>>,
}

/// Replays `job` on `cluster` and reports timing, utilisation and memory.
pub fn simulate(
    job: &AnnotatedJob,
    cluster: &ClusterSpec,
    options: &SimOptions,
) -> Result<SimReport, SimError> {
    let preps: Vec<Prep> = job.job.traces.iter().map(Prep::new).collect();
    let workers = job
        .job
        .workers
        .iter()
        .map(|w| Worker {
            rank: w.rank,
            host_index: w.host,
            device_index: w.device,
            trace: w.trace,
            pc: 0,
            host: HostState::Running,
            streams: (0..preps[w.trace].streams.len())
                .map(|_| StreamState::default())
                .collect(),
            fired: BTreeSet::new(),
            live: BTreeMap::new(),
            allocated: 0,
            peak: 0,
            compute_busy: 0,
            comm_busy: 0,
            compute_iv: Vec::new(),
            comm_iv: Vec::new(),
            other_iv: Vec::new(),
        })
        .collect();
    let groups = job.job.collectives.len();
    let mut engine = Engine {
        job,
        capacity: cluster.memory_capacity,
        preps,
        workers,
        now: 0,
        tie: 0,
        heap: BinaryHeap::new(),
        pending: VecDeque::new(),
        event_waits: BTreeMap::new(),
        arrivals: (0..groups).map(|_| Vec::new()).collect(),
        released: alloc::vec![false; groups],
        op_arrivals: 0,
        op_ends: 0,
        oom: None,
        timeline: options.timeline.then(Vec::new),
    };
    engine.run()?;
    Ok(engine.report())
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: Nanos, kind: SimEventKind) {
        let ev = SimEvent {
            time,
            tie_seq: self.tie,
            kind,
        };
        self.tie += 1;
        self.heap.push(Reverse(ev));
    }

    fn run(&mut self) -> Result<(), SimError> {
        for w in 0..self.workers.len() {
            self.pending.push_back(Action::RunHost(w));
        }
        self.drain()?;
        while let Some(Reverse(ev)) = self.heap.pop() {
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            match ev.kind {
                SimEventKind::HostResume { worker } => {
                    self.workers[worker].host = HostState::Running;
                    self.pending.push_back(Action::RunHost(worker));
                }
                SimEventKind::OpEnd { worker, stream, .. } => {
                    self.workers[worker].streams[stream].busy = false;
                    self.op_ends += 1;
                    self.pending.push_back(Action::Schedule(worker, stream));
                }
            }
            self.drain()?;
        }
        self.check_finished()
    }

    fn drain(&mut self) -> Result<(), SimError> {
        while let Some(a) = self.pending.pop_front() {
            match a {
                Action::RunHost(w) => self.run_host(w),
                Action::Schedule(w, s) => {
                    self.schedule(w, s)?;
                    self.check_host(w);
                }
            }
        }
        Ok(())
    }

    fn check_host(&mut self, w: usize) {
        let worker = &self.workers[w];
        let ready = match worker.host {
            HostState::WaitStream(s) => worker.streams[s].drained(),
            HostState::WaitDevice => worker.streams.iter().all(StreamState::drained),
            _ => false,
        };
        if ready {
            self.workers[w].host = HostState::Running;
            self.pending.push_back(Action::RunHost(w));
        }
    }

    fn run_host(&mut self, w: usize) {
        let job = self.job;
        let trace = &job.job.traces[self.workers[w].trace];
        if self.workers[w].host != HostState::Running {
            return;
        }
        loop {
            let worker = &mut self.workers[w];
            let i = worker.pc;
            let Some(ev) = trace.events.get(i) else {
                worker.host = HostState::Done;
                return;
            };
            worker.pc += 1;
            match &ev.kind {
                EventKind::HostGap { duration } => {
                    if *duration > 0 {
                        worker.host = HostState::Sleeping;
                        let t = self.now + duration;
                        self.push(t, SimEventKind::HostResume { worker: w });
                        return;
                    }
                }
                EventKind::MemAlloc { alloc, bytes } => {
                    worker.live.insert(*alloc, *bytes);
                    worker.allocated += bytes;
                    worker.peak = worker.peak.max(worker.allocated);
                    if worker.allocated > self.capacity && self.oom.is_none() {
                        self.oom = Some(OomMarker {
                            rank: worker.rank,
                            seq: ev.seq,
                            allocated: worker.allocated,
                            capacity: self.capacity,
                        });
                    }
                }
                EventKind::MemFree { alloc } => {
                    if let Some(b) = worker.live.remove(alloc) {
                        worker.allocated -= b;
                    }
                }
                EventKind::CommInit { .. } => {}
                EventKind::EventSynchronize { event, version } => {
                    if !worker.fired.contains(&(event.0, *version)) {
                        worker.host = HostState::WaitEvent;
                        self.event_waits
                            .entry((w, event.0, *version))
                            .or_default()
                            .push(Waiter::Host);
                        return;
                    }
                }
                EventKind::StreamSynchronize { stream } => {
                    if let Some(s) = self.preps[worker.trace].index(*stream) {
                        if !worker.streams[s].drained() {
                            worker.host = HostState::WaitStream(s);
                            return;
                        }
                    }
                }
                EventKind::DeviceSynchronize => {
                    if !worker.streams.iter().all(StreamState::drained) {
                        worker.host = HostState::WaitDevice;
                        return;
                    }
                }
                _ => {
                    let s = self.preps[worker.trace].op_stream[i];
                    worker.streams[s].queue.push_back(i);
                    self.op_arrivals += 1;
                    self.pending.push_back(Action::Schedule(w, s));
                }
            }
        }
    }

    fn schedule(&mut self, w: usize, s: usize) -> Result<(), SimError> {
        let job = self.job;
        let t = self.workers[w].trace;
        let trace = &job.job.traces[t];
        loop {
            let Worker { streams, fired, .. } = &mut self.workers[w];
            let st = &mut streams[s];
            if st.busy {
                return Ok(());
            }
            let Some(i) = st.queue.pop_front() else {
                return Ok(());
            };
            let ev = &trace.events[i];
            let now = self.now;
            match &ev.kind {
                EventKind::KernelLaunch(_)
                | EventKind::Memcpy { .. }
                | EventKind::Memset { .. } => {
                    let d = job.durations[t][i];
                    st.busy = true;
                    st.busy_ns += d;
                    let worker = &mut self.workers[w];
                    worker.compute_busy += d;
                    worker.compute_iv.push((now, now + d));
                    self.span(w, s, now, now + d, i);
                    self.push(
                        now + d,
                        SimEventKind::OpEnd {
                            worker: w,
                            stream: s,
                            op: i,
                        },
                    );
                    return Ok(());
                }
                EventKind::EventRecord { event, version, .. } => {
                    self.op_ends += 1;
                    self.workers[w].fired.insert((event.0, *version));
                    if let Some(waiters) = self.event_waits.remove(&(w, event.0, *version)) {
                        for waiter in waiters {
                            match waiter {
                                Waiter::Stream { stream, since } => {
                                    let other = &mut self.workers[w].streams[stream];
                                    other.busy = false;
                                    other.stall_ns += now - since;
                                    self.workers[w].other_iv.push((since, now));
                                    self.op_ends += 1;
                                    self.wait_span(w, stream, since, now, event.0);
                                    self.pending.push_back(Action::Schedule(w, stream));
                                }
                                Waiter::Host => {
                                    self.workers[w].host = HostState::Running;
                                    self.pending.push_back(Action::RunHost(w));
                                }
                            }
                        }
                    }
                }
                EventKind::StreamWaitEvent { event, version, .. } => {
                    if fired.contains(&(event.0, *version)) {
                        self.op_ends += 1;
                    } else {
                        st.busy = true;
                        self.event_waits
                            .entry((w, event.0, *version))
                            .or_default()
                            .push(Waiter::Stream {
                                stream: s,
                                since: now,
                            });
                        return Ok(());
                    }
                }
                EventKind::Collective { comm, call_idx, .. } => {
                    st.busy = true;
                    let translated = job.job.workers[w].comm(*comm);
                    let g = job.job.group(translated, *call_idx).ok_or_else(|| {
                        SimError::Internal(format!(
                            "rank {}: no group for comm {translated} idx {call_idx}",
                            self.workers[w].rank
                        ))
                    })?;
                    if self.released[g] {
                        return Err(SimError::Internal(format!(
                            "comm {translated} idx {call_idx}: more arrivals than members"
                        )));
                    }
                    self.arrivals[g].push((w, s, i, now));
                    let record = &job.job.collectives[g];
                    if self.arrivals[g].len() == record.nranks as usize {
                        self.released[g] = true;
                        let wire = job.wire[g];
                        let members = core::mem::take(&mut self.arrivals[g]);
                        for (mw, ms, mi, arrived) in members {
                            let worker = &mut self.workers[mw];
                            let stream = &mut worker.streams[ms];
                            stream.stall_ns += now - arrived;
                            stream.busy_ns += wire;
                            worker.comm_busy += wire;
                            worker.comm_iv.push((arrived, now + wire));
                            if self.timeline.is_some() {
                                self.collective_spans(mw, ms, arrived, now, now + wire, mi);
                            }
                            self.push(
                                now + wire,
                                SimEventKind::OpEnd {
                                    worker: mw,
                                    stream: ms,
                                    op: mi,
                                },
                            );
                        }
                    }
                    return Ok(());
                }
                _ => {
                    return Err(SimError::Internal(format!(
                        "event seq {} is not a stream operation",
                        ev.seq
                    )))
                }
            }
        }
    }

    fn span(&mut self, w: usize, s: usize, start: Nanos, end: Nanos, i: usize) {
        let Some(tl) = self.timeline.as_mut() else {
            return;
        };
        let worker = &self.workers[w];
        let ev = &self.job.job.traces[worker.trace].events[i];
        let (kind, name) = match &ev.kind {
            EventKind::KernelLaunch(k) => (SpanKind::Compute, k.op_kind.clone()),
            EventKind::Memcpy { direction, .. } => {
                (SpanKind::Copy, memcpy_op_kind(*direction).to_string())
            }
            _ => (SpanKind::Copy, "memset.d".to_string()),
        };
        let stream = self.preps[worker.trace].streams[s].0;
        tl.push(TimelineSpan {
            rank: worker.rank,
            stream,
            start,
            end,
            kind,
            name,
            seq: ev.seq,
        });
    }

    fn wait_span(&mut self, w: usize, s: usize, start: Nanos, end: Nanos, event: u32) {
        if end == start {
            return;
        }
        let Some(tl) = self.timeline.as_mut() else {
            return;
        };
        let worker = &self.workers[w];
        let stream = self.preps[worker.trace].streams[s].0;
        tl.push(TimelineSpan {
            rank: worker.rank,
            stream,
            start,
            end,
            kind: SpanKind::EventWait,
            name: format!("wait event {event}"),
            seq: 0,
        });
    }

    fn collective_spans(
        &mut self,
        w: usize,
        s: usize,
        arrived: Nanos,
        released: Nanos,
        end: Nanos,
        i: usize,
    ) {
        let Some(tl) = self.timeline.as_mut() else {
            return;
        };
        let worker = &self.workers[w];
        let ev = &self.job.job.traces[worker.trace].events[i];
        let EventKind::Collective { kind, comm, .. } = &ev.kind else {
            return;
        };
        let comm = self.job.job.workers[w].comm(*comm);
        let stream = self.preps[worker.trace].streams[s].0;
        if released > arrived {
            tl.push(TimelineSpan {
                rank: worker.rank,
                stream,
                start: arrived,
                end: released,
                kind: SpanKind::CommWait,
                name: format!("{kind} comm {comm} (waiting)"),
                seq: ev.seq,
            });
        }
        tl.push(TimelineSpan {
            rank: worker.rank,
            stream,
            start: released,
            end,
            kind: SpanKind::Comm,
            name: format!("{kind} comm {comm}"),
            seq: ev.seq,
        });
    }

    fn check_finished(&self) -> Result<(), SimError> {
        let mut residue = Vec::new();
        for w in &self.workers {
            let trace = &self.job.job.traces[w.trace];
            if w.host != HostState::Done {
                let at = trace
                    .events
                    .get(w.pc.saturating_sub(1))
                    .map(|e| e.seq)
                    .unwrap_or(0);
                residue.push(format!(
                    "rank {} host blocked ({:?}) at seq {at}",
                    w.rank, w.host
                ));
            }
            for (s, st) in w.streams.iter().enumerate() {
                if !st.drained() {
                    let id = self.preps[w.trace].streams[s].0;
                    residue.push(format!(
                        "rank {} stream {id} blocked with {} queued",
                        w.rank,
                        st.queue.len()
                    ));
                }
            }
        }
        for (&(w, e, v), waiters) in &self.event_waits {
            residue.push(format!(
                "rank {}: {} waiter(s) on event {e} version {v}",
                self.workers[w].rank,
                waiters.len()
            ));
        }
        for (g, arr) in self.arrivals.iter().enumerate() {
            if !arr.is_empty() {
                let rec = &self.job.job.collectives[g];
                residue.push(format!(
                    "collective comm {} idx {}: {}/{} arrived",
                    rec.comm,
                    rec.call_idx,
                    arr.len(),
                    rec.nranks
                ));
            }
        }
        if residue.is_empty() {
            Ok(())
        } else {
            Err(SimError::Deadlock {
                time: self.now,
                residue,
            })
        }
    }

    fn report(mut self) -> SimReport {
        let total = self.now;
        let mut devices = Vec::with_capacity(self.workers.len());
        for w in &mut self.workers {
            let streams = w
                .streams
                .iter()
                .enumerate()
                .map(|(s, st)| StreamReport {
                    stream: self.preps[w.trace].streams[s].0,
                    busy: st.busy_ns,
                    stall: st.stall_ns,
                    idle: total - st.busy_ns - st.stall_ns,
                })
                .collect();
            let exposed = uncovered_len(&w.comm_iv, &mut w.compute_iv);
            let mut all: Vec<(Nanos, Nanos)> = w
                .compute_iv
                .iter()
                .chain(&w.comm_iv)
                .chain(&w.other_iv)
                .copied()
                .collect();
            let occupied = union_len(&mut all);
            devices.push(DeviceReport {
                rank: w.rank,
                host: w.host_index,
                device: w.device_index,
                compute_busy: w.compute_busy,
                comm_busy: w.comm_busy,
                exposed_comm: exposed,
                idle: total - occupied,
                peak_memory: w.peak,
                streams,
            });
        }
        let mut timeline = self.timeline.take();
        if let Some(tl) = timeline.as_mut() {
            tl.sort_by_key(|a| (a.rank, a.stream, a.start, a.end));
        }
        SimReport {
            total_time: total,
            devices,
            oom: self.oom,
            op_arrivals: self.op_arrivals,
            op_ends: self.op_ends,
            warnings: self.job.warnings.iter().map(|w| w.to_string()).collect(),
            timeline,
        }
    }
}

#[cfg(test)]
mod tests;
