//! Worker deduplication and job-level trace collation.
//!
//! Workers that do the same work on different data shards produce traces
//! that differ only in identities (global rank, communicator membership,
//! allocation handles) and host timing jitter. [`canonicalize_event`] strips
//! those, [`signature`] hashes the canonical sequence, and [`dedup_workers`]
//! groups workers into classes, confirming every hash match by comparing the
//! full canonical sequences.
//!
//! [`collate`] expands representatives back to every rank through a
//! [`GroupTranslator`] and matches each `(communicator, call_idx)` across its
//! members.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use thiserror::Error;

use crate::cluster::{ClusterError, ClusterSpec, TopologyClass};
use crate::trace::{CollectiveKind, CommId, EventKind, TraceEvent, WorkerTrace};
use crate::Rank;

/// Canonical form of one event: kind, kernel shape, byte counts, stream,
/// communicator size and call index. Global rank, communicator rank and
/// identity, allocation handles and host-gap durations are left out.
pub fn canonicalize_event(e: &TraceEvent) -> String {
    let mut s = String::new();
    let _ = write_canonical(&mut s, &e.kind);
    s
}

fn write_canonical(s: &mut String, kind: &EventKind) -> core::fmt::Result {
    s.push_str(kind.tag());
    match kind {
        EventKind::HostGap { .. } | EventKind::MemFree { .. } | EventKind::DeviceSynchronize => {
            Ok(())
        }
        EventKind::KernelLaunch(k) => {
            write!(
                s,
                " s={} op={} dt={} f={} b={} a=",
                k.stream.0,
                k.op_kind,
                k.dtype.name(),
                k.flop_count,
                k.bytes_moved
            )?;
            for (key, v) in &k.attrs {
                write!(s, "{key}:{v},")?;
            }
            Ok(())
        }
        EventKind::MemAlloc { bytes, .. } => write!(s, " b={bytes}"),
        EventKind::Memcpy {
            stream,
            direction,
            bytes,
        } => write!(s, " s={} d={} b={bytes}", stream.0, direction.name()),
        EventKind::Memset { stream, bytes } => write!(s, " s={} b={bytes}", stream.0),
        EventKind::EventRecord {
            stream,
            event,
            version,
        }
        | EventKind::StreamWaitEvent {
            stream,
            event,
            version,
        } => {
            write!(s, " s={} e={} v={version}", stream.0, event.0)
        }
        EventKind::EventSynchronize { event, version } => write!(s, " e={} v={version}", event.0),
        EventKind::StreamSynchronize { stream } => write!(s, " s={}", stream.0),
        EventKind::CommInit { nranks, .. } => write!(s, " n={nranks}"),
        EventKind::Collective {
            stream,
            call_idx,
            kind,
            bytes,
            nranks,
            ..
        } => {
            write!(
                s,
                " s={} i={call_idx} k={} b={bytes} n={nranks}",
                stream.0,
                kind.name()
            )
        }
    }
}

/// Rolling hash over a worker's canonical event sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WorkerSignature(pub u128);

const HASH_BASE: u128 = 0x0000_0000_0100_0000_0000_0000_0000_013B;
const TOKEN_END: u128 = 0x1FF;

/// Polynomial rolling hash (mod 2^128) that can be extended one event at a
/// time, so it can be computed while a trace is being produced.
#[derive(Debug, Clone, Copy, Default)]
pub struct RollingHash {
    state: u128,
}

impl RollingHash {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_token(&mut self, token: &str) {
        for b in token.bytes() {
            self.state = self
                .state
                .wrapping_mul(HASH_BASE)
                .wrapping_add(b as u128 + 1);
        }
        self.state = self.state.wrapping_mul(HASH_BASE).wrapping_add(TOKEN_END);
    }

    pub fn finish(&self) -> WorkerSignature {
        WorkerSignature(self.state)
    }
}

pub fn signature(trace: &WorkerTrace) -> WorkerSignature {
    let mut h = RollingHash::new();
    let mut buf = String::new();
    for e in &trace.events {
        buf.clear();
        let _ = write_canonical(&mut buf, &e.kind);
        h.push_token(&buf);
    }
    h.finish()
}

fn canonical_sequence(trace: &WorkerTrace) -> Vec<String> {
    trace.events.iter().map(canonicalize_event).collect()
}

/// Result of [`dedup_workers`]: one representative per class (its lowest
/// rank) and a map from every other rank to its representative.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dedup {
    pub representatives: Vec<Rank>,
    pub duplicates: BTreeMap<Rank, Rank>,
}

/// Partitions workers into classes of identical canonical sequences.
pub fn dedup_workers(traces: &[WorkerTrace]) -> Dedup {
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by_key(|&i| traces[i].global_rank);

    // hash -> list of (representative index, canonical sequence)
    let mut classes: BTreeMap<WorkerSignature, Vec<(usize, Vec<String>)>> = BTreeMap::new();
    let mut out = Dedup::default();
    for i in order {
        let t = &traces[i];
        let sig = signature(t);
        let bucket = classes.entry(sig).or_default();
        let canon = canonical_sequence(t);
        match bucket.iter().find(|(_, seq)| *seq == canon) {
            Some(&(rep, _)) => {
                out.duplicates
                    .insert(t.global_rank, traces[rep].global_rank);
            }
            None => {
                out.representatives.push(t.global_rank);
                bucket.push((i, canon));
            }
        }
    }
    out
}

/// Maps a representative's communicators onto a duplicate rank that plays
/// the same role. Returns the duplicate's communicator and its rank within it.
pub trait GroupTranslator {
    fn translate(&self, comm: CommId, representative: Rank, rank: Rank) -> Option<(CommId, u32)>;
}

/// Translator for jobs without duplicates.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoTranslation;

impl GroupTranslator for NoTranslation {
    fn translate(&self, _: CommId, _: Rank, _: Rank) -> Option<(CommId, u32)> {
        None
    }
}

/// One matched collective call across all members of its communicator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CollectiveGroupRecord {
    pub comm: CommId,
    pub call_idx: u64,
    pub kind: CollectiveKind,
    pub bytes: u64,
    pub nranks: u32,
    /// Participants ordered by their rank within the communicator.
    pub ranks: Vec<Rank>,
    pub topology: TopologyClass,
}

/// A rank of the job, backed by a representative's trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpandedWorker {
    pub rank: Rank,
    pub host: u32,
    pub device: u32,
    /// Index into [`JobTrace::traces`].
    pub trace: usize,
    comm_map: Vec<(CommId, CommId)>,
}

impl ExpandedWorker {
    /// The communicator this worker uses where its trace says `comm`.
    pub fn comm(&self, comm: CommId) -> CommId {
        match self.comm_map.binary_search_by_key(&comm, |&(from, _)| from) {
            Ok(i) => self.comm_map[i].1,
            Err(_) => comm,
        }
    }

    pub fn is_representative(&self) -> bool {
        self.comm_map.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobTrace {
    /// Representative traces, ordered by rank.
    pub traces: Vec<WorkerTrace>,
    /// Every non-representative rank and the representative it duplicates.
    pub duplicates: BTreeMap<Rank, Rank>,
    /// Every rank of the job, ordered by rank.
    pub workers: Vec<ExpandedWorker>,
    pub collectives: Vec<CollectiveGroupRecord>,
    group_index: BTreeMap<(CommId, u64), usize>,
}

impl JobTrace {
    /// Index into [`JobTrace::collectives`] of a resolved call.
    pub fn group(&self, comm: CommId, call_idx: u64) -> Option<usize> {
        self.group_index.get(&(comm, call_idx)).copied()
    }

    pub fn num_ranks(&self) -> usize {
        self.workers.len()
    }

    pub fn trace_of(&self, worker: &ExpandedWorker) -> &WorkerTrace {
        &self.traces[worker.trace]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CollateError {
    #[error("rank {0} has more than one trace")]
    DuplicateTrace(Rank),
    #[error("rank {0} is both a representative and a duplicate")]
    RepresentativeIsDuplicate(Rank),
    #[error("rank {rank} duplicates rank {representative}, which has no trace")]
    MissingRepresentative { rank: Rank, representative: Rank },
    #[error(transparent)]
    Placement(#[from] ClusterError),
    #[error(
        "trace of rank {rank} claims host {host} device {device}, cluster places it elsewhere"
    )]
    PlacementMismatch { rank: Rank, host: u32, device: u32 },
    #[error("cannot translate comm {comm} of rank {representative} onto duplicate rank {rank}")]
    Untranslatable {
        comm: CommId,
        representative: Rank,
        rank: Rank,
    },
    #[error("comm {comm}: ranks {first} and {second} both claim communicator rank {my_rank}")]
    RankConflict {
        comm: CommId,
        my_rank: u32,
        first: Rank,
        second: Rank,
    },
    #[error("comm {comm}: members disagree on its size ({a} vs {b})")]
    NranksMismatch { comm: CommId, a: u32, b: u32 },
    #[error("comm {comm}: {present} of {nranks} members present, missing communicator ranks {missing:?}")]
    IncompleteCommunicator {
        comm: CommId,
        nranks: u32,
        present: u32,
        missing: Vec<u32>,
    },
    #[error("unmatched collective {comm} idx={call_idx}: missing ranks {missing:?}")]
    Unmatched {
        comm: CommId,
        call_idx: u64,
        missing: Vec<Rank>,
    },
    #[error("collective {comm} idx={call_idx}: rank {rank} issues {detail}")]
    Inconsistent {
        comm: CommId,
        call_idx: u64,
        rank: Rank,
        detail: String,
    },
}

#[derive(Default)]
struct CommAcc {
    nranks: u32,
    members: BTreeMap<u32, Rank>,
    calls: Vec<(CollectiveKind, u64)>,
    counts: BTreeMap<Rank, u64>,
}

/// Builds the job-level trace. `traces` are the representatives (in any
/// order); `duplicates` maps every other rank of the job to one of them.
pub fn collate(
    mut traces: Vec<WorkerTrace>,
    duplicates: BTreeMap<Rank, Rank>,
    cluster: &ClusterSpec,
    translator: &dyn GroupTranslator,
) -> Result<JobTrace, CollateError> {
    traces.sort_by_key(|t| t.global_rank);
    let mut trace_of_rank: BTreeMap<Rank, usize> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        if trace_of_rank.insert(t.global_rank, i).is_some() {
            return Err(CollateError::DuplicateTrace(t.global_rank));
        }
        let (host, device) = cluster.placement(t.global_rank)?;
        if (host, device) != (t.host_index, t.device_index) {
            return Err(CollateError::PlacementMismatch {
                rank: t.global_rank,
                host: t.host_index,
                device: t.device_index,
            });
        }
    }

    let mut workers: Vec<ExpandedWorker> = Vec::with_capacity(traces.len() + duplicates.len());
    for (i, t) in traces.iter().enumerate() {
        workers.push(ExpandedWorker {
            rank: t.global_rank,
            host: t.host_index,
            device: t.device_index,
            trace: i,
            comm_map: Vec::new(),
        });
    }
    for (&rank, &rep) in &duplicates {
        if trace_of_rank.contains_key(&rank) {
            return Err(CollateError::RepresentativeIsDuplicate(rank));
        }
        let &ti = trace_of_rank
            .get(&rep)
            .ok_or(CollateError::MissingRepresentative {
                rank,
                representative: rep,
            })?;
        let (host, device) = cluster.placement(rank)?;
        let mut comm_map = Vec::new();
        for e in &traces[ti].events {
            if let EventKind::CommInit { comm, .. } = e.kind {
                let (to, _) =
                    translator
                        .translate(comm, rep, rank)
                        .ok_or(CollateError::Untranslatable {
                            comm,
                            representative: rep,
                            rank,
                        })?;
                comm_map.push((comm, to));
            }
        }
        comm_map.sort_unstable();
        workers.push(ExpandedWorker {
            rank,
            host,
            device,
            trace: ti,
            comm_map,
        });
    }
    workers.sort_by_key(|w| w.rank);

    let mut comms: BTreeMap<CommId, CommAcc> = BTreeMap::new();
    for w in &workers {
        let trace = &traces[w.trace];
        let rep = trace.global_rank;
        for e in &trace.events {
            match e.kind {
                EventKind::CommInit {
                    comm,
                    nranks,
                    my_rank,
                } => {
                    let (c, my_rank) = if w.is_representative() {
                        (comm, my_rank)
                    } else {
                        // Checked during expansion.
                        translator.translate(comm, rep, w.rank).ok_or(
                            CollateError::Untranslatable {
                                comm,
                                representative: rep,
                                rank: w.rank,
                            },
                        )?
                    };
                    let acc = comms.entry(c).or_default();
                    if acc.members.is_empty() {
                        acc.nranks = nranks;
                    } else if acc.nranks != nranks {
                        return Err(CollateError::NranksMismatch {
                            comm: c,
                            a: acc.nranks,
                            b: nranks,
                        });
                    }
                    if let Some(&other) = acc.members.get(&my_rank) {
                        return Err(CollateError::RankConflict {
                            comm: c,
                            my_rank,
                            first: other,
                            second: w.rank,
                        });
                    }
                    acc.members.insert(my_rank, w.rank);
                }
                EventKind::Collective {
                    comm,
                    call_idx,
                    kind,
                    bytes,
                    ..
                } => {
                    let c = w.comm(comm);
                    let acc = comms.entry(c).or_default();
                    let idx = call_idx as usize;
                    if idx < acc.calls.len() {
                        let (k0, b0) = acc.calls[idx];
                        if k0 != kind || b0 != bytes {
                            return Err(CollateError::Inconsistent {
                                comm: c,
                                call_idx,
                                rank: w.rank,
                                detail: format!(
                                    "{kind} of {bytes} bytes where others issue {k0} of {b0} bytes"
                                ),
                            });
                        }
                    } else {
                        acc.calls.push((kind, bytes));
                    }
                    *acc.counts.entry(w.rank).or_insert(0) += 1;
                }
                _ => {}
            }
        }
    }

    let mut collectives = Vec::new();
    let mut group_index = BTreeMap::new();
    for (comm, acc) in &comms {
        if acc.members.len() as u32 != acc.nranks {
            let missing = (0..acc.nranks)
                .filter(|r| !acc.members.contains_key(r))
                .collect();
            return Err(CollateError::IncompleteCommunicator {
                comm: *comm,
                nranks: acc.nranks,
                present: acc.members.len() as u32,
                missing,
            });
        }
        let ranks: Vec<Rank> = acc.members.values().copied().collect();
        let topology = cluster.topology_class(ranks.iter().copied());
        for (k, &(kind, bytes)) in acc.calls.iter().enumerate() {
            let missing: Vec<Rank> = ranks
                .iter()
                .copied()
                .filter(|r| acc.counts.get(r).copied().unwrap_or(0) <= k as u64)
                .collect();
            if !missing.is_empty() {
                return Err(CollateError::Unmatched {
                    comm: *comm,
                    call_idx: k as u64,
                    missing,
                });
            }
            group_index.insert((*comm, k as u64), collectives.len());
            collectives.push(CollectiveGroupRecord {
                comm: *comm,
                call_idx: k as u64,
                kind,
                bytes,
                nranks: acc.nranks,
                ranks: ranks.clone(),
                topology,
            });
        }
    }

    Ok(JobTrace {
        traces,
        duplicates,
        workers,
        collectives,
        group_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::DeviceClass;
    use crate::trace::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn coll_trace(rank: Rank, calls: u64, my_rank: u32) -> WorkerTrace {
        let mut t = WorkerTrace::new(rank, 0, rank);
        t.push(EventKind::CommInit {
            comm: CommId(1),
            nranks: 2,
            my_rank,
        });
        for i in 0..calls {
            t.push(EventKind::Collective {
                stream: StreamId(1),
                comm: CommId(1),
                call_idx: i,
                kind: CollectiveKind::AllReduce,
                bytes: 1 << 20,
                nranks: 2,
            });
        }
        t
    }

    fn cluster() -> ClusterSpec {
        ClusterSpec::new(1, 8, 1 << 34, DeviceClass::fast())
    }

    #[test]
    fn dp_peers_canonicalize_identically() {
        let a = coll_trace(0, 1, 0);
        let b = coll_trace(1, 1, 1);
        for (x, y) in a.events.iter().zip(&b.events) {
            assert_eq!(canonicalize_event(x), canonicalize_event(y));
        }
    }

    #[test]
    fn kernels_differing_in_shape_differ() {
        let mk = |m: u64| {
            let mut attrs = Attrs::new();
            attrs.insert("m".into(), m);
            TraceEvent {
                seq: 0,
                kind: EventKind::KernelLaunch(Kernel {
                    stream: StreamId(0),
                    op_kind: "gemm.fwd".into(),
                    dtype: Dtype::Bf16,
                    flop_count: 2 * m,
                    bytes_moved: 8,
                    attrs,
                }),
            }
        };
        assert_ne!(canonicalize_event(&mk(64)), canonicalize_event(&mk(128)));
        let g = |d| TraceEvent {
            seq: 3,
            kind: EventKind::HostGap { duration: d },
        };
        assert_eq!(canonicalize_event(&g(4000)), canonicalize_event(&g(6000)));
    }

    #[test]
    fn dedup_identical_workers() {
        let traces: Vec<WorkerTrace> = (0..8).map(|r| coll_trace(r, 2, 0)).collect();
        let d = dedup_workers(&traces);
        assert_eq!(d.representatives, vec![0]);
        assert_eq!(d.duplicates.len(), 7);
        assert!(d.duplicates.values().all(|&r| r == 0));

        let single = dedup_workers(&traces[3..4]);
        assert_eq!(single.representatives, vec![3]);
        assert!(single.duplicates.is_empty());

        let mixed = dedup_workers(&[coll_trace(0, 2, 0), coll_trace(1, 3, 0)]);
        assert_eq!(mixed.representatives, vec![0, 1]);
    }

    #[test]
    fn two_workers_one_group() {
        let job = collate(
            vec![coll_trace(1, 1, 1), coll_trace(0, 1, 0)],
            BTreeMap::new(),
            &cluster(),
            &NoTranslation,
        )
        .unwrap();
        assert_eq!(job.collectives.len(), 1);
        let g = &job.collectives[0];
        assert_eq!(g.ranks, vec![0, 1]);
        assert_eq!(g.topology, TopologyClass::IntraHost);
        assert_eq!(job.group(CommId(1), 0), Some(0));
    }

    #[test]
    fn unmatched_call_is_reported() {
        let err = collate(
            vec![coll_trace(0, 4, 0), coll_trace(1, 3, 1)],
            BTreeMap::new(),
            &cluster(),
            &NoTranslation,
        )
        .unwrap_err();
        assert_eq!(
            err,
            CollateError::Unmatched {
                comm: CommId(1),
                call_idx: 3,
                missing: vec![1]
            }
        );
        assert_eq!(
            err.to_string(),
            "unmatched collective 1 idx=3: missing ranks [1]"
        );
    }

    #[test]
    fn inconsistent_bytes_are_reported() {
        let mut b = coll_trace(1, 1, 1);
        if let EventKind::Collective { bytes, .. } = &mut b.events[1].kind {
            *bytes = 7;
        }
        let err = collate(
            vec![coll_trace(0, 1, 0), b],
            BTreeMap::new(),
            &cluster(),
            &NoTranslation,
        )
        .unwrap_err();
        assert!(matches!(err, CollateError::Inconsistent { rank: 1, .. }));
    }

    #[test]
    fn missing_member_and_missing_translation() {
        let err = collate(
            vec![coll_trace(0, 1, 0)],
            BTreeMap::new(),
            &cluster(),
            &NoTranslation,
        )
        .unwrap_err();
        assert!(
            matches!(err, CollateError::IncompleteCommunicator { missing, .. } if missing == vec![1])
        );
        let mut dups = BTreeMap::new();
        dups.insert(1, 0);
        let err = collate(vec![coll_trace(0, 1, 0)], dups, &cluster(), &NoTranslation).unwrap_err();
        assert!(matches!(err, CollateError::Untranslatable { .. }));
    }

    #[test]
    fn collate_is_order_independent() {
        let a = collate(
            vec![coll_trace(0, 2, 0), coll_trace(1, 2, 1)],
            BTreeMap::new(),
            &cluster(),
            &NoTranslation,
        );
        let b = collate(
            vec![coll_trace(1, 2, 1), coll_trace(0, 2, 0)],
            BTreeMap::new(),
            &cluster(),
            &NoTranslation,
        );
        assert_eq!(a, b);
    }

    #[test]
    fn rolling_hash_is_incremental() {
        let t = coll_trace(0, 3, 0);
        let mut h = RollingHash::new();
        for e in &t.events {
            h.push_token(&canonicalize_event(e));
        }
        assert_eq!(h.finish(), signature(&t));
        assert_ne!(signature(&t), signature(&coll_trace(0, 2, 0)));
    }
}
