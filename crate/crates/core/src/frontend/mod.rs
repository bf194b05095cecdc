//! Synthetic workload frontend.
//!
//! Produces the trace a transformer training iteration would leave behind
//! under tensor, pipeline and data parallelism, in the schema of
//! [`crate::trace`]. Only one rank per pipeline stage needs to be generated
//! (see [`unique_workers`]); the rest of the job is recovered through
//! [`ParallelLayout`]'s group translation.
//!
//! Stream usage on every worker:
//!
//! | stream | work |
//! |---|---|
//! | 0 | compute kernels, copies, tensor-parallel collectives |
//! | 1 | data-parallel gradient reduction |
//! | 2, 3 | receive / send activations |
//! | 4, 5 | receive / send gradients |

mod generate;
pub mod layout;
mod profile;
pub mod schedule;

pub use generate::generate_trace;
pub use layout::{CommRole, Coords, P2pDir, ParallelLayout};
pub use profile::{
    profile_mode_annotate, profile_table, ConstantOracle, EstimatorOracle, NoisyOracle,
    ProfileError, TimedTrace, TimingOracle,
};

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use thiserror::Error;

use crate::cluster::{ClusterError, ClusterSpec};
use crate::model::{ConfigError, ConfigPoint, Derived, ModelSpec, ScheduleKind};
use crate::{Nanos, Rank};

/// Host time spent dispatching one launch when nothing else is configured.
pub const DEFAULT_DISPATCH_GAP_NS: Nanos = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrontendOptions {
    pub schedule: ScheduleKind,
    /// Host gap emitted before every kernel launch, copy and memset.
    pub dispatch_gap_ns: Nanos,
    /// Upper bound of a uniform random extra added to each gap.
    pub gap_jitter_ns: Nanos,
    pub seed: u64,
}

impl Default for FrontendOptions {
    fn default() -> Self {
        FrontendOptions {
            schedule: ScheduleKind::OneFOneB,
            dispatch_gap_ns: DEFAULT_DISPATCH_GAP_NS,
            gap_jitter_ns: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrontendError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid cluster: {0}")]
    Cluster(#[from] ClusterError),
}

/// A validated (model, config, cluster, schedule) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub model: ModelSpec,
    pub config: ConfigPoint,
    pub derived: Derived,
    pub layout: ParallelLayout,
    pub schedule: ScheduleKind,
}

impl Plan {
    pub fn new(
        model: &ModelSpec,
        config: &ConfigPoint,
        cluster: &ClusterSpec,
        schedule: ScheduleKind,
    ) -> Result<Self, FrontendError> {
        cluster.validate()?;
        let derived = config.derive(model, cluster.num_devices())?;
        let schedule = schedule.resolve(config)?;
        if schedule != ScheduleKind::GPipe && derived.microbatches < config.pp as u64 {
            return Err(ConfigError::TooFewMicrobatches {
                microbatches: derived.microbatches,
                pp: config.pp,
            }
            .into());
        }
        Ok(Plan {
            model: model.clone(),
            config: *config,
            derived,
            layout: ParallelLayout::new(config, derived.dp),
            schedule,
        })
    }
}

/// Ranks whose traces must be generated, and the representative of every
/// other rank.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UniqueWorkers {
    pub ranks: Vec<Rank>,
    pub expansion: BTreeMap<Rank, Rank>,
}

/// One representative per pipeline stage: the stage's first rank. Every rank
/// of a stage runs the same kernels, collectives and memory operations,
/// differing only in which communicators it belongs to.
pub fn unique_workers(
    model: &ModelSpec,
    config: &ConfigPoint,
    cluster: &ClusterSpec,
) -> Result<UniqueWorkers, FrontendError> {
    cluster.validate()?;
    let derived = config.derive(model, cluster.num_devices())?;
    let layout = ParallelLayout::new(config, derived.dp);
    let mut out = UniqueWorkers::default();
    for rank in 0..layout.num_ranks() {
        let rep = layout.representative(rank);
        if rep == rank {
            out.ranks.push(rank);
        } else {
            out.expansion.insert(rank, rep);
        }
    }
    Ok(out)
}
