//! Configuration search over a lattice of [`ConfigPoint`]s.
//!
//! A [`SearchDriver`] proposes candidates from a [`Strategy`], consults the
//! pruning [`tactics`] against the trial history before each dispatch, and
//! records every result in an append-only history. The driver is
//! single-threaded; callers decide how many proposals to evaluate at once
//! (see [`run_search`] for the batch-synchronous loop).

mod driver;
pub mod tactics;

pub use driver::{
    early_stop, run_batches, run_search, Dispatch, EarlyStop, SearchDriver, SearchOptions,
    StopRule, Strategy,
};
pub use tactics::{apply_tactics, Tactic, Verdict};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::ClusterSpec;
use crate::frontend::{FrontendError, Plan};
use crate::model::{ConfigPoint, ModelSpec, ScheduleKind};
use crate::Nanos;

/// Candidate values for every knob. The lattice is their Cartesian product,
/// enumerated with `tp` outermost and `dist_optimizer` innermost, each list
/// in the order given.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub tp: Vec<u32>,
    pub pp: Vec<u32>,
    pub virtual_stages: Vec<u32>,
    pub micro_mult: Vec<u32>,
    pub act_recompute: Vec<bool>,
    pub seq_parallel: Vec<bool>,
    pub dist_optimizer: Vec<bool>,
    pub global_batch: u64,
}

impl SearchSpace {
    /// The standard knob table. Boolean lists are ordered so that grid
    /// order visits every tactic premise before the configs it prunes.
    pub fn standard(global_batch: u64) -> Self {
        SearchSpace {
            tp: vec![1, 2, 4, 8],
            pp: vec![1, 2, 4, 8],
            virtual_stages: vec![1, 2, 4],
            micro_mult: vec![1, 2, 4, 6, 8],
            act_recompute: vec![true, false],
            seq_parallel: vec![true, false],
            dist_optimizer: vec![false, true],
            global_batch,
        }
    }

    pub fn product_size(&self) -> usize {
        self.tp.len()
            * self.pp.len()
            * self.virtual_stages.len()
            * self.micro_mult.len()
            * self.act_recompute.len()
            * self.seq_parallel.len()
            * self.dist_optimizer.len()
    }

    /// Every point of the product in enumeration order.
    pub fn points(&self) -> Vec<ConfigPoint> {
        let mut out = Vec::with_capacity(self.product_size());
        for &tp in &self.tp {
            for &pp in &self.pp {
                for &virtual_stages in &self.virtual_stages {
                    for &micro_mult in &self.micro_mult {
                        for &act_recompute in &self.act_recompute {
                            for &seq_parallel in &self.seq_parallel {
                                for &dist_optimizer in &self.dist_optimizer {
                                    out.push(ConfigPoint {
                                        tp,
                                        pp,
                                        micro_mult,
                                        virtual_stages,
                                        act_recompute,
                                        seq_parallel,
                                        dist_optimizer,
                                        global_batch: self.global_batch,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("search space has no valid configuration ({excluded} points excluded)")]
    EmptySpace { excluded: usize },
}

/// The lattice split into valid points and excluded points with reasons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Enumerated {
    pub valid: Vec<ConfigPoint>,
    pub excluded: Vec<(ConfigPoint, FrontendError)>,
}

pub fn enumerate_space(
    space: &SearchSpace,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    schedule: ScheduleKind,
) -> Result<Enumerated, SearchError> {
    let mut out = Enumerated {
        valid: Vec::new(),
        excluded: Vec::new(),
    };
    for p in space.points() {
        match Plan::new(model, &p, cluster, schedule) {
            Ok(_) => out.valid.push(p),
            Err(e) => out.excluded.push((p, e)),
        }
    }
    if out.valid.is_empty() {
        return Err(SearchError::EmptySpace {
            excluded: out.excluded.len(),
        });
    }
    Ok(out)
}

/// Result of evaluating (or inferring) one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed { time: Nanos, mfu: f64 },
    Oom,
    Invalid(String),
}

impl Outcome {
    pub fn mfu(&self) -> Option<f64> {
        match self {
            Outcome::Completed { mfu, .. } => Some(*mfu),
            _ => None,
        }
    }

    pub fn time(&self) -> Option<Nanos> {
        match self {
            Outcome::Completed { time, .. } => Some(*time),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Simulated,
    /// Decided by `tactic` from history entry `premise` without simulating.
    Inferred {
        tactic: Tactic,
        premise: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    Oom,
    SkippedPruned,
    Invalid,
}

impl TrialStatus {
    pub fn name(self) -> &'static str {
        match self {
            TrialStatus::Completed => "completed",
            TrialStatus::Oom => "oom",
            TrialStatus::SkippedPruned => "pruned",
            TrialStatus::Invalid => "invalid",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    /// Position in the history.
    pub index: usize,
    pub config: ConfigPoint,
    pub outcome: Outcome,
    pub provenance: Provenance,
}

impl TrialRecord {
    pub fn status(&self) -> TrialStatus {
        match (&self.provenance, &self.outcome) {
            (Provenance::Inferred { .. }, _) => TrialStatus::SkippedPruned,
            (_, Outcome::Completed { .. }) => TrialStatus::Completed,
            (_, Outcome::Oom) => TrialStatus::Oom,
            (_, Outcome::Invalid(_)) => TrialStatus::Invalid,
        }
    }

    pub fn is_pruned(&self) -> bool {
        matches!(self.provenance, Provenance::Inferred { .. })
    }
}

fn rank_class(o: &Outcome) -> u8 {
    match o {
        Outcome::Completed { .. } => 0,
        Outcome::Oom => 1,
        Outcome::Invalid(_) => 2,
    }
}

/// Best first: completed trials by MFU descending, then OOM, then invalid.
/// Ties break on the configuration.
pub fn compare_trials(a: &TrialRecord, b: &TrialRecord) -> Ordering {
    rank_class(&a.outcome)
        .cmp(&rank_class(&b.outcome))
        .then_with(|| match (a.outcome.mfu(), b.outcome.mfu()) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            _ => Ordering::Equal,
        })
        .then_with(|| a.config.cmp(&b.config))
}

/// History indices, best first.
pub fn rank_trials(history: &[TrialRecord]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..history.len()).collect();
    idx.sort_by(|&a, &b| compare_trials(&history[a], &history[b]));
    idx
}

/// Evaluates one configuration. Implementations must be pure.
pub trait Evaluator {
    fn evaluate(&self, config: &ConfigPoint) -> Outcome;
}

impl<F: Fn(&ConfigPoint) -> Outcome> Evaluator for F {
    fn evaluate(&self, config: &ConfigPoint) -> Outcome {
        self(config)
    }
}

/// Trial history plus bookkeeping, as returned by a finished search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub trials: Vec<TrialRecord>,
    /// `trials` indices, best first.
    pub ranking: Vec<usize>,
    pub stopped_early: bool,
}

impl SearchOutcome {
    pub fn best(&self) -> Option<&TrialRecord> {
        self.ranking
            .first()
            .map(|&i| &self.trials[i])
            .filter(|t| t.outcome.mfu().is_some())
    }

    pub fn count(&self, status: TrialStatus) -> usize {
        self.trials.iter().filter(|t| t.status() == status).count()
    }

    /// Pruned trials over simulated trials.
    pub fn pruned_fraction(&self) -> f64 {
        let pruned = self.count(TrialStatus::SkippedPruned);
        let simulated = self.trials.len() - pruned;
        if simulated == 0 {
            0.0
        } else {
            pruned as f64 / simulated as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::DeviceClass;

    #[test]
    fn standard_product_size() {
        assert_eq!(SearchSpace::standard(512).product_size(), 1920);
        assert_eq!(SearchSpace::standard(512).points().len(), 1920);
    }

    #[test]
    fn invalid_points_are_excluded_with_reasons() {
        let c = ClusterSpec::new(1, 4, 80 << 30, DeviceClass::fast());
        let e = enumerate_space(
            &SearchSpace::standard(64),
            &ModelSpec::tiny(),
            &c,
            ScheduleKind::OneFOneB,
        )
        .unwrap();
        assert!(e.valid.iter().all(|p| p.tp <= 4 && p.tp * p.pp <= 4));
        assert!(e.valid.iter().all(|p| p.pp > 1 || p.virtual_stages == 1));
        assert!(e.excluded.iter().any(|(p, _)| p.tp == 8));
        assert_eq!(e.valid.len() + e.excluded.len(), 1920);
        let mut sorted = e.valid.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), e.valid.len());
    }

    #[test]
    fn empty_space_is_an_error() {
        let c = ClusterSpec::new(1, 4, 80 << 30, DeviceClass::fast());
        let s = SearchSpace {
            tp: vec![3],
            ..SearchSpace::standard(64)
        };
        assert!(matches!(
            enumerate_space(&s, &ModelSpec::tiny(), &c, ScheduleKind::OneFOneB),
            Err(SearchError::EmptySpace { .. })
        ));
    }

    fn rec(index: usize, tp: u32, outcome: Outcome) -> TrialRecord {
        TrialRecord {
            index,
            config: ConfigPoint {
                tp,
                ..ConfigPoint::data_parallel(8)
            },
            outcome,
            provenance: Provenance::Simulated,
        }
    }

    #[test]
    fn ranking_puts_failures_last() {
        let h = vec![
            rec(0, 1, Outcome::Oom),
            rec(1, 2, Outcome::Completed { time: 10, mfu: 0.3 }),
            rec(2, 4, Outcome::Invalid("x".into())),
            rec(3, 8, Outcome::Completed { time: 5, mfu: 0.6 }),
        ];
        assert_eq!(rank_trials(&h), [3, 1, 0, 2]);
    }
}
