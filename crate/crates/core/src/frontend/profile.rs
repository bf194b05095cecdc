//! Profiling mode: attaching measured (here: oracle) durations to a trace and
//! turning them into profile-table rows.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cluster::DeviceClass;
use crate::estimator::{Estimator, KernelDesc, ProfileRow, ProfileTable, TableError};
use crate::math::round_ns;
use crate::trace::{Dtype, WorkerTrace};
use crate::Nanos;

/// Source of ground-truth kernel durations.
pub trait TimingOracle {
    fn duration(&self, kernel: &KernelDesc<'_>) -> Option<Nanos>;
}

/// Every kernel takes the same time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstantOracle(pub Nanos);

impl TimingOracle for ConstantOracle {
    fn duration(&self, _: &KernelDesc<'_>) -> Option<Nanos> {
        Some(self.0)
    }
}

/// Uses an estimator as stand-in hardware.
#[derive(Debug, Clone)]
pub struct EstimatorOracle<E> {
    pub estimator: E,
    pub device: DeviceClass,
}

impl<E: Estimator> TimingOracle for EstimatorOracle<E> {
    fn duration(&self, kernel: &KernelDesc<'_>) -> Option<Nanos> {
        self.estimator
            .estimate_kernel(kernel, &self.device)
            .ok()
            .map(|e| e.duration)
    }
}

/// Multiplies another oracle's durations by `1 + relative·u`, with `u`
/// uniform in `[-1, 1]` and drawn from a generator seeded by `seed` and the
/// kernel's shape, so equal kernels always get equal noise.
#[derive(Debug, Clone)]
pub struct NoisyOracle<O> {
    pub inner: O,
    pub relative: f64,
    pub seed: u64,
}

impl<O: TimingOracle> TimingOracle for NoisyOracle<O> {
    fn duration(&self, kernel: &KernelDesc<'_>) -> Option<Nanos> {
        let base = self.inner.duration(kernel)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ shape_hash(kernel));
        let u: f64 = rng.random_range(-1.0..=1.0);
        Some(round_ns(base as f64 * (1.0 + self.relative * u)))
    }
}

fn shape_hash(k: &KernelDesc<'_>) -> u64 {
    let mut s = String::new();
    let _ = write!(
        s,
        "{}|{}|{}|{}|",
        k.op_kind,
        k.dtype.map_or("-", Dtype::name),
        k.flop_count,
        k.bytes_moved
    );
    for (key, v) in k.attrs {
        let _ = write!(s, "{key}:{v},");
    }
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProfileError {
    #[error("seq {seq}: oracle has no duration for `{op_kind}`")]
    MissingOpKind { seq: u64, op_kind: String },
    #[error("`{op_kind}` measured as both {a} ns and {b} ns for the same shape")]
    Conflict { op_kind: String, a: Nanos, b: Nanos },
    #[error(transparent)]
    Table(#[from] TableError),
}

/// A trace with an observed duration for every kernel, copy and memset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedTrace {
    pub trace: WorkerTrace,
    /// Parallel to `trace.events`; `None` for events that are not timed.
    pub durations: Vec<Option<Nanos>>,
    pub device: String,
}

impl TimedTrace {
    /// One row per distinct kernel shape.
    pub fn profile_rows(&self) -> Result<Vec<ProfileRow>, ProfileError> {
        rows_of(core::slice::from_ref(self))
    }
}

fn rows_of(traces: &[TimedTrace]) -> Result<Vec<ProfileRow>, ProfileError> {
    // Rows keyed with a zero duration; the value is the observed duration.
    let mut seen: BTreeMap<ProfileRow, Nanos> = BTreeMap::new();
    for t in traces {
        for (e, d) in t.trace.events.iter().zip(&t.durations) {
            let (Some(desc), Some(d)) = (KernelDesc::from_event(&e.kind), *d) else {
                continue;
            };
            let key = ProfileRow::from_desc(&desc, &t.device, 0);
            match seen.get(&key) {
                Some(&prev) if prev != d => {
                    return Err(ProfileError::Conflict {
                        op_kind: key.op_kind,
                        a: prev,
                        b: d,
                    });
                }
                Some(_) => {}
                None => {
                    seen.insert(key, d);
                }
            }
        }
    }
    Ok(seen
        .into_iter()
        .map(|(k, duration)| ProfileRow { duration, ..k })
        .collect())
}

/// Builds a profile table from one or more timed traces.
pub fn profile_table(traces: &[TimedTrace]) -> Result<ProfileTable, ProfileError> {
    Ok(ProfileTable::from_rows(rows_of(traces)?)?)
}

/// Runs every timed operation of `trace` through `oracle`.
pub fn profile_mode_annotate<O: TimingOracle + ?Sized>(
    trace: &WorkerTrace,
    oracle: &O,
    device: &str,
) -> Result<TimedTrace, ProfileError> {
    let mut durations = Vec::with_capacity(trace.events.len());
    for e in &trace.events {
        durations.push(match KernelDesc::from_event(&e.kind) {
            Some(desc) => {
                Some(
                    oracle
                        .duration(&desc)
                        .ok_or_else(|| ProfileError::MissingOpKind {
                            seq: e.seq,
                            op_kind: desc.op_kind.into(),
                        })?,
                )
            }
            None => None,
        });
    }
    Ok(TimedTrace {
        trace: trace.clone(),
        durations,
        device: device.into(),
    })
}
