//! Runtime estimation for kernels and collectives.
//!
//! An [`Estimator`] predicts how long one kernel (or copy) runs on a device
//! class and how long a collective occupies the wire. Two reference
//! implementations ship: [`Roofline`] and [`TableEstimator`], which
//! interpolates a [`ProfileTable`] and falls back to the roofline for kernels
//! it has never seen. Collectives default to the ring alpha-beta model in
//! [`collective_estimate`].
//!
//! [`annotate`] applies an estimator to a whole [`JobTrace`].

mod collective;
mod roofline;
mod table;

pub use collective::collective_estimate;
pub use roofline::{roofline_estimate, Roofline, DEFAULT_EFFICIENCY, UNKNOWN_EFFICIENCY};
pub use table::{ProfileRow, ProfileTable, TableError, TableEstimator};

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::cluster::{DeviceClass, TopologyClass};
use crate::collator::JobTrace;
use crate::trace::{Attrs, CollectiveKind, CopyDirection, Dtype, EventKind};
use crate::{Nanos, Rank};

static NO_ATTRS: Attrs = Attrs::new();

/// What an estimator sees of a timed device operation. Copies and memsets
/// are described as kernels of family `memcpy` / `memset` with no dtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelDesc<'a> {
    pub op_kind: &'a str,
    pub dtype: Option<Dtype>,
    pub flop_count: u64,
    pub bytes_moved: u64,
    pub attrs: &'a Attrs,
}

impl<'a> KernelDesc<'a> {
    pub fn from_event(kind: &'a EventKind) -> Option<Self> {
        match kind {
            EventKind::KernelLaunch(k) => Some(KernelDesc {
                op_kind: &k.op_kind,
                dtype: Some(k.dtype),
                flop_count: k.flop_count,
                bytes_moved: k.bytes_moved,
                attrs: &k.attrs,
            }),
            EventKind::Memcpy {
                direction, bytes, ..
            } => Some(KernelDesc {
                op_kind: memcpy_op_kind(*direction),
                dtype: None,
                flop_count: 0,
                bytes_moved: *bytes,
                attrs: &NO_ATTRS,
            }),
            EventKind::Memset { bytes, .. } => Some(KernelDesc {
                op_kind: "memset.d",
                dtype: None,
                flop_count: 0,
                bytes_moved: *bytes,
                attrs: &NO_ATTRS,
            }),
            _ => None,
        }
    }

    pub fn family(&self) -> &'a str {
        crate::trace::op_family(self.op_kind)
    }

    /// Amount of work used to order rows of one op_kind: FLOPs when the
    /// kernel has any, bytes otherwise.
    pub fn work(&self) -> u64 {
        if self.flop_count > 0 {
            self.flop_count
        } else {
            self.bytes_moved
        }
    }
}

pub fn memcpy_op_kind(direction: CopyDirection) -> &'static str {
    match direction {
        CopyDirection::H2D => "memcpy.h2d",
        CopyDirection::D2H => "memcpy.d2h",
        CopyDirection::D2D => "memcpy.d2d",
    }
}

/// Non-fatal estimation issue, surfaced in the simulation report.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum EstimateWarning {
    /// Roofline used the default efficiency for an unrecognised family.
    UnknownFamily(String),
    /// The profile table had no rows for this op_kind; roofline was used.
    TableMiss(String),
}

impl fmt::Display for EstimateWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EstimateWarning::UnknownFamily(op) => write!(
                f,
                "unknown kernel family for `{op}`, efficiency 0.5 assumed"
            ),
            EstimateWarning::TableMiss(op) => {
                write!(f, "`{op}` not in profile table, roofline used")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Estimate {
    pub duration: Nanos,
    pub warning: Option<EstimateWarning>,
}

impl Estimate {
    pub fn exact(duration: Nanos) -> Self {
        Estimate {
            duration,
            warning: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EstimateError {
    #[error("no runtime available for `{0}`")]
    Missing(String),
}

/// Pluggable runtime model. Implementations must be pure.
pub trait Estimator {
    fn estimate_kernel(
        &self,
        kernel: &KernelDesc<'_>,
        device: &DeviceClass,
    ) -> Result<Estimate, EstimateError>;

    fn estimate_collective(
        &self,
        kind: CollectiveKind,
        bytes: u64,
        nranks: u32,
        topology: TopologyClass,
        device: &DeviceClass,
    ) -> Result<Nanos, EstimateError> {
        Ok(collective_estimate(kind, bytes, nranks, topology, device))
    }
}

impl<E: Estimator + ?Sized> Estimator for &E {
    fn estimate_kernel(
        &self,
        kernel: &KernelDesc<'_>,
        device: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        (**self).estimate_kernel(kernel, device)
    }

    fn estimate_collective(
        &self,
        kind: CollectiveKind,
        bytes: u64,
        nranks: u32,
        topology: TopologyClass,
        device: &DeviceClass,
    ) -> Result<Nanos, EstimateError> {
        (**self).estimate_collective(kind, bytes, nranks, topology, device)
    }
}

/// Every kernel takes the same time; collectives use the alpha-beta model
/// unless `collective` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantEstimator {
    pub kernel: Nanos,
    pub collective: Option<Nanos>,
}

impl Estimator for ConstantEstimator {
    fn estimate_kernel(
        &self,
        _: &KernelDesc<'_>,
        _: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        Ok(Estimate::exact(self.kernel))
    }

    fn estimate_collective(
        &self,
        kind: CollectiveKind,
        bytes: u64,
        nranks: u32,
        topology: TopologyClass,
        device: &DeviceClass,
    ) -> Result<Nanos, EstimateError> {
        Ok(match self.collective {
            Some(d) if nranks > 1 => d,
            Some(_) => 0,
            None => collective_estimate(kind, bytes, nranks, topology, device),
        })
    }
}

/// A [`JobTrace`] with a duration for every timed event and a wire time for
/// every collective group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedJob {
    pub job: JobTrace,
    /// `durations[t][i]` belongs to event `i` of representative trace `t`:
    /// the predicted runtime for kernels and copies, the recorded duration
    /// for host gaps, zero otherwise.
    pub durations: Vec<Vec<Nanos>>,
    /// Wire time of `job.collectives[g]`.
    pub wire: Vec<Nanos>,
    pub warnings: Vec<EstimateWarning>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("rank {rank} seq {seq}: {source}")]
pub struct AnnotateError {
    pub rank: Rank,
    pub seq: u64,
    pub source: EstimateError,
}

/// Annotates every representative trace and every collective group.
/// Duplicates share their representative's annotations.
pub fn annotate<E: Estimator + ?Sized>(
    job: JobTrace,
    estimator: &E,
    device: &DeviceClass,
) -> Result<AnnotatedJob, AnnotateError> {
    let mut warnings = BTreeSet::new();
    let mut durations = Vec::with_capacity(job.traces.len());
    for t in &job.traces {
        let mut d = Vec::with_capacity(t.events.len());
        for e in &t.events {
            let ns = match &e.kind {
                EventKind::HostGap { duration } => *duration,
                kind => match KernelDesc::from_event(kind) {
                    Some(desc) => {
                        let est = estimator.estimate_kernel(&desc, device).map_err(|source| {
                            AnnotateError {
                                rank: t.global_rank,
                                seq: e.seq,
                                source,
                            }
                        })?;
                        if let Some(w) = est.warning {
                            warnings.insert(w);
                        }
                        est.duration
                    }
                    None => 0,
                },
            };
            d.push(ns);
        }
        durations.push(d);
    }
    let mut wire = Vec::with_capacity(job.collectives.len());
    for g in &job.collectives {
        let ns = estimator
            .estimate_collective(g.kind, g.bytes, g.nranks, g.topology, device)
            .map_err(|source| {
                // Blame the first member's call site.
                let rank = g.ranks.first().copied().unwrap_or(0);
                AnnotateError {
                    rank,
                    seq: collective_seq(&job, rank, g.comm, g.call_idx),
                    source,
                }
            })?;
        wire.push(ns);
    }
    Ok(AnnotatedJob {
        job,
        durations,
        wire,
        warnings: warnings.into_iter().collect(),
    })
}

fn collective_seq(job: &JobTrace, rank: Rank, comm: crate::trace::CommId, call_idx: u64) -> u64 {
    let Some(w) = job.workers.iter().find(|w| w.rank == rank) else {
        return 0;
    };
    job.trace_of(w)
        .events
        .iter()
        .find(|e| matches!(e.kind, EventKind::Collective { comm: c, call_idx: i, .. } if w.comm(c) == comm && i == call_idx))
        .map(|e| e.seq)
        .unwrap_or(0)
}
