use super::*;
use crate::cluster::{DeviceClass, TopologyClass};
use crate::collator::{collate, NoTranslation};
use crate::estimator::{annotate, Estimate, EstimateError, Estimator, KernelDesc};
use crate::trace::{Attrs, CollectiveKind, CommId, Dtype, EventId, Kernel, WorkerTrace};
use alloc::vec;

const US: Nanos = 1_000;
const GB: u64 = 1 << 30;

/// Kernel durations come from the `ns` attribute; every collective has the
/// same wire time.
struct AttrNs {
    wire: Nanos,
}

impl Estimator for AttrNs {
    fn estimate_kernel(
        &self,
        k: &KernelDesc<'_>,
        _: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        Ok(Estimate::exact(k.attrs.get("ns").copied().unwrap_or(0)))
    }

    fn estimate_collective(
        &self,
        _: CollectiveKind,
        _: u64,
        _: u32,
        _: TopologyClass,
        _: &DeviceClass,
    ) -> Result<Nanos, EstimateError> {
        Ok(self.wire)
    }
}

fn kernel(stream: u32, ns: Nanos) -> EventKind {
    let mut attrs = Attrs::new();
    attrs.insert("ns".into(), ns);
    EventKind::KernelLaunch(Kernel {
        stream: StreamId(stream),
        op_kind: "gemm.fwd".into(),
        dtype: Dtype::Bf16,
        flop_count: 1,
        bytes_moved: 1,
        attrs,
    })
}

fn gap(ns: Nanos) -> EventKind {
    EventKind::HostGap { duration: ns }
}

fn coll(stream: u32, comm: u64, call_idx: u64, nranks: u32) -> EventKind {
    EventKind::Collective {
        stream: StreamId(stream),
        comm: CommId(comm),
        call_idx,
        kind: CollectiveKind::AllReduce,
        bytes: 1 << 20,
        nranks,
    }
}

fn worker(rank: Rank, events: Vec<EventKind>) -> WorkerTrace {
    let mut t = WorkerTrace::new(rank, 0, rank);
    for e in events {
        t.push(e);
    }
    t
}

fn run_with(
    traces: Vec<WorkerTrace>,
    capacity: u64,
    wire: Nanos,
    timeline: bool,
) -> Result<SimReport, SimError> {
    let cluster = ClusterSpec::new(1, 8, capacity, DeviceClass::fast());
    let job = collate(traces, BTreeMap::new(), &cluster, &NoTranslation).unwrap();
    let job = annotate(job, &AttrNs { wire }, &cluster.device).unwrap();
    simulate(&job, &cluster, &SimOptions { timeline })
}

fn run(traces: Vec<WorkerTrace>) -> SimReport {
    run_with(traces, 80 * GB, 0, false).unwrap()
}

#[test]
fn empty_job_takes_no_time() {
    let r = run(vec![]);
    assert_eq!(r.total_time, 0);
    let r = run(vec![worker(0, vec![])]);
    assert_eq!(r.total_time, 0);
}

#[test]
fn gap_then_kernel_is_serial() {
    let r = run(vec![worker(0, vec![gap(2 * US), kernel(0, 10 * US)])]);
    assert_eq!(r.total_time, 12 * US);
    assert_eq!(r.devices[0].compute_busy, 10 * US);
    assert_eq!(r.devices[0].idle, 2 * US);
    assert_eq!(r.op_arrivals, r.op_ends);
}

#[test]
fn free_streams_run_concurrently() {
    let r = run(vec![worker(
        0,
        vec![kernel(0, 100 * US), kernel(1, 80 * US)],
    )]);
    assert_eq!(r.total_time, 100 * US);
}

#[test]
fn same_stream_serializes() {
    let r = run(vec![worker(
        0,
        vec![kernel(0, 100 * US), kernel(0, 80 * US)],
    )]);
    assert_eq!(r.total_time, 180 * US);
}

#[test]
fn stream_waits_on_recorded_event() {
    let r = run_with(
        vec![worker(
            0,
            vec![
                kernel(0, 50 * US),
                EventKind::EventRecord {
                    stream: StreamId(0),
                    event: EventId(0),
                    version: 1,
                },
                EventKind::StreamWaitEvent {
                    stream: StreamId(1),
                    event: EventId(0),
                    version: 1,
                },
                kernel(1, 30 * US),
            ],
        )],
        80 * GB,
        0,
        true,
    )
    .unwrap();
    assert_eq!(r.total_time, 80 * US);
    let s1 = r.devices[0].streams.iter().find(|s| s.stream == 1).unwrap();
    assert_eq!(s1.stall, 50 * US);
    assert_eq!(s1.busy, 30 * US);
    let tl = r.timeline.unwrap();
    let b = tl
        .iter()
        .find(|s| s.stream == 1 && s.kind == SpanKind::Compute)
        .unwrap();
    assert_eq!((b.start, b.end), (50 * US, 80 * US));
}

#[test]
fn wait_on_fired_event_adds_nothing() {
    let r = run(vec![worker(
        0,
        vec![
            EventKind::EventRecord {
                stream: StreamId(0),
                event: EventId(0),
                version: 1,
            },
            gap(5 * US),
            EventKind::StreamWaitEvent {
                stream: StreamId(1),
                event: EventId(0),
                version: 1,
            },
            kernel(1, 30 * US),
        ],
    )]);
    assert_eq!(r.total_time, 35 * US);
}

#[test]
fn synchronize_on_idle_device_is_free() {
    let r = run(vec![worker(
        0,
        vec![EventKind::DeviceSynchronize, kernel(0, 7 * US)],
    )]);
    assert_eq!(r.total_time, 7 * US);
}

#[test]
fn host_synchronization_blocks_dispatch() {
    // Without the synchronize both kernels would start at 0 on separate streams.
    let r = run(vec![worker(
        0,
        vec![
            kernel(0, 40 * US),
            EventKind::StreamSynchronize {
                stream: StreamId(0),
            },
            kernel(1, 10 * US),
        ],
    )]);
    assert_eq!(r.total_time, 50 * US);
    let r = run(vec![worker(
        0,
        vec![
            kernel(0, 40 * US),
            kernel(2, 60 * US),
            EventKind::DeviceSynchronize,
            kernel(1, 10 * US),
        ],
    )]);
    assert_eq!(r.total_time, 70 * US);
    let r = run(vec![worker(
        0,
        vec![
            kernel(0, 40 * US),
            EventKind::EventRecord {
                stream: StreamId(0),
                event: EventId(3),
                version: 1,
            },
            EventKind::EventSynchronize {
                event: EventId(3),
                version: 1,
            },
            kernel(1, 10 * US),
        ],
    )]);
    assert_eq!(r.total_time, 50 * US);
}

fn init(comm: u64, nranks: u32, my_rank: u32) -> EventKind {
    EventKind::CommInit {
        comm: CommId(comm),
        nranks,
        my_rank,
    }
}

#[test]
fn collective_releases_in_lockstep() {
    let r = run_with(
        vec![
            worker(0, vec![init(1, 2, 0), gap(10 * US), coll(1, 1, 0, 2)]),
            worker(1, vec![init(1, 2, 1), gap(50 * US), coll(1, 1, 0, 2)]),
        ],
        80 * GB,
        15 * US,
        false,
    )
    .unwrap();
    assert_eq!(r.total_time, 65 * US);
    let s = |rank: usize| {
        r.devices[rank]
            .streams
            .iter()
            .find(|s| s.stream == 1)
            .unwrap()
            .clone()
    };
    assert_eq!(s(0).stall, 40 * US);
    assert_eq!(s(1).stall, 0);
    assert_eq!(s(0).busy, 15 * US);
    assert_eq!(r.devices[0].comm_busy, 15 * US);
    assert_eq!(r.devices[0].exposed_comm, 55 * US);
}

#[test]
fn single_rank_collective_has_no_stall() {
    let r = run_with(
        vec![worker(0, vec![init(1, 1, 0), coll(1, 1, 0, 1)])],
        80 * GB,
        0,
        false,
    )
    .unwrap();
    assert_eq!(r.total_time, 0);
    assert!(r.devices[0].streams.iter().all(|s| s.stall == 0));
}

#[test]
fn compute_overlaps_blocked_collective() {
    let r = run_with(
        vec![
            worker(
                0,
                vec![init(1, 2, 0), coll(1, 1, 0, 2), kernel(0, 100 * US)],
            ),
            worker(1, vec![init(1, 2, 1), gap(60 * US), coll(1, 1, 0, 2)]),
        ],
        80 * GB,
        20 * US,
        false,
    )
    .unwrap();
    assert_eq!(r.total_time, 100 * US);
    assert_eq!(r.devices[0].compute_busy, 100 * US);
    assert_eq!(r.devices[0].exposed_comm, 0);
}

#[test]
fn oom_is_flagged_at_the_offending_allocation() {
    let allocs = (0..3)
        .map(|i| EventKind::MemAlloc {
            alloc: AllocId(i),
            bytes: 10 * GB,
        })
        .collect();
    let r = run_with(vec![worker(0, allocs)], 25 * GB, 0, false).unwrap();
    let oom = r.oom.clone().unwrap();
    assert_eq!(oom.seq, 2);
    assert_eq!(oom.allocated, 30 * GB);
    assert_eq!(r.peak_memory(), 30 * GB);
}

#[test]
fn freed_memory_is_reused() {
    let r = run_with(
        vec![worker(
            0,
            vec![
                EventKind::MemAlloc {
                    alloc: AllocId(0),
                    bytes: 10 * GB,
                },
                EventKind::MemFree { alloc: AllocId(0) },
                EventKind::MemAlloc {
                    alloc: AllocId(1),
                    bytes: 20 * GB,
                },
            ],
        )],
        25 * GB,
        0,
        false,
    )
    .unwrap();
    assert!(!r.is_oom());
    assert_eq!(r.peak_memory(), 20 * GB);
}

#[test]
fn crossed_collectives_deadlock() {
    let err = run_with(
        vec![
            worker(
                0,
                vec![
                    init(1, 2, 0),
                    init(2, 2, 0),
                    coll(0, 1, 0, 2),
                    coll(0, 2, 0, 2),
                ],
            ),
            worker(
                1,
                vec![
                    init(1, 2, 1),
                    init(2, 2, 1),
                    coll(0, 2, 0, 2),
                    coll(0, 1, 0, 2),
                ],
            ),
        ],
        80 * GB,
        5,
        false,
    )
    .unwrap_err();
    let SimError::Deadlock { residue, .. } = err else {
        panic!("{err}")
    };
    assert!(
        residue.iter().any(|r| r.contains("1/2 arrived")),
        "{residue:?}"
    );
}

#[test]
fn stream_accounting_is_conserved() {
    let r = run_with(
        vec![
            worker(
                0,
                vec![
                    init(1, 2, 0),
                    kernel(0, 30 * US),
                    coll(1, 1, 0, 2),
                    gap(3 * US),
                    kernel(0, 5 * US),
                ],
            ),
            worker(1, vec![init(1, 2, 1), gap(50 * US), coll(1, 1, 0, 2)]),
        ],
        80 * GB,
        15 * US,
        false,
    )
    .unwrap();
    for d in &r.devices {
        for s in &d.streams {
            assert_eq!(s.busy + s.stall + s.idle, r.total_time);
        }
    }
    assert_eq!(r.op_arrivals, r.op_ends);
}

#[test]
fn replay_is_deterministic() {
    let mk = || {
        vec![
            worker(
                0,
                vec![
                    init(1, 2, 0),
                    kernel(0, 30 * US),
                    coll(1, 1, 0, 2),
                    kernel(2, 9 * US),
                ],
            ),
            worker(
                1,
                vec![
                    init(1, 2, 1),
                    gap(50 * US),
                    coll(1, 1, 0, 2),
                    kernel(0, 4 * US),
                ],
            ),
        ]
    };
    assert_eq!(
        run_with(mk(), GB, 7, true).unwrap(),
        run_with(mk(), GB, 7, true).unwrap()
    );
}
