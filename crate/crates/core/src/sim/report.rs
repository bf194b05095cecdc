use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSpec;
use crate::trace::Dtype;
use crate::{Nanos, Rank};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamReport {
    pub stream: u32,
    /// Time running kernels, copies or collective wire transfers.
    pub busy: Nanos,
    /// Time blocked at the head of the queue on an event or on collective peers.
    pub stall: Nanos,
    /// `total − busy − stall`.
    pub idle: Nanos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceReport {
    pub rank: Rank,
    pub host: u32,
    pub device: u32,
    /// Sum of kernel, copy and memset durations over all streams.
    pub compute_busy: Nanos,
    /// Sum of collective wire times over all streams.
    pub comm_busy: Nanos,
    /// Time some collective was pending or on the wire while no compute ran
    /// on the device.
    pub exposed_comm: Nanos,
    /// Time no stream had an operation in flight.
    pub idle: Nanos,
    pub peak_memory: u64,
    pub streams: Vec<StreamReport>,
}

/// First allocation that exceeded device memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OomMarker {
    pub rank: Rank,
    pub seq: u64,
    /// Bytes allocated after the offending allocation.
    pub allocated: u64,
    pub capacity: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    Compute,
    Copy,
    /// A collective from its arrival until its peers joined.
    CommWait,
    /// A collective on the wire.
    Comm,
    /// A stream blocked on an event.
    EventWait,
}

/// One occupied interval of one stream, for timeline export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimelineSpan {
    pub rank: Rank,
    pub stream: u32,
    pub start: Nanos,
    pub end: Nanos,
    pub kind: SpanKind,
    pub name: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimReport {
    pub total_time: Nanos,
    pub devices: Vec<DeviceReport>,
    pub oom: Option<OomMarker>,
    /// Device operations handed to a stream queue.
    pub op_arrivals: u64,
    /// Device operations that completed.
    pub op_ends: u64,
    pub warnings: Vec<String>,
    pub timeline: Option<Vec<TimelineSpan>>,
}

impl SimReport {
    pub fn is_oom(&self) -> bool {
        self.oom.is_some()
    }

    pub fn peak_memory(&self) -> u64 {
        self.devices
            .iter()
            .map(|d| d.peak_memory)
            .max()
            .unwrap_or(0)
    }

    /// Mean exposed communication over devices, as a fraction of total time.
    pub fn exposed_comm_fraction(&self) -> f64 {
        if self.total_time == 0 || self.devices.is_empty() {
            return 0.0;
        }
        let sum: u128 = self.devices.iter().map(|d| d.exposed_comm as u128).sum();
        sum as f64 / self.devices.len() as f64 / self.total_time as f64
    }

    pub fn total_comm_busy(&self) -> Nanos {
        self.devices.iter().map(|d| d.comm_busy).sum()
    }

    pub fn total_compute_busy(&self) -> Nanos {
        self.devices.iter().map(|d| d.compute_busy).sum()
    }
}

/// Model FLOPs utilisation: `model_flops / (total_time · devices · peak)`.
/// `None` for OOM runs and empty jobs.
pub fn compute_mfu(
    report: &SimReport,
    model_flops: u64,
    cluster: &ClusterSpec,
    dtype: Dtype,
) -> Option<f64> {
    if report.is_oom() || report.total_time == 0 {
        return None;
    }
    let peak = cluster.device.peak_flops.get(dtype);
    let secs = report.total_time as f64 * 1e-9;
    Some(model_flops as f64 / (secs * cluster.num_devices() as f64 * peak))
}

/// Total length of the union of half-open intervals.
pub(crate) fn union_len(intervals: &mut [(Nanos, Nanos)]) -> Nanos {
    intervals.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(Nanos, Nanos)> = None;
    for &(s, e) in intervals.iter() {
        if e <= s {
            continue;
        }
        match cur {
            Some((cs, ce)) if s <= ce => cur = Some((cs, ce.max(e))),
            Some((cs, ce)) => {
                total += ce - cs;
                cur = Some((s, e));
            }
            None => cur = Some((s, e)),
        }
    }
    if let Some((cs, ce)) = cur {
        total += ce - cs;
    }
    total
}

/// Length of `a`'s union minus the part covered by `b`'s union.
pub(crate) fn uncovered_len(a: &[(Nanos, Nanos)], b: &mut [(Nanos, Nanos)]) -> Nanos {
    // |A − B| = |A ∪ B| − |B|
    let mut both: Vec<(Nanos, Nanos)> = a.iter().chain(b.iter()).copied().collect();
    union_len(&mut both) - union_len(b)
}
