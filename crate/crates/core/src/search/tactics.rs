//! Pruning tactics. Each one infers a candidate's result from a prior trial
//! whose configuration differs in exactly one knob.

use core::fmt;

use serde::{Deserialize, Serialize};

use super::{Outcome, TrialRecord};
use crate::model::ConfigPoint;
use crate::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tactic {
    /// The same config with recomputation ran out of memory, so the one
    /// without recomputation will too.
    RecomputeOom,
    /// The same config with sequence parallelism ran out of memory, so the
    /// one without will too.
    SeqParallelOom,
    /// Enabling the distributed optimizer keeps the runtime of the config
    /// without it.
    DistOptimizerRuntime,
    /// Without pipelining, more microbatches keep the runtime of fewer.
    MicrobatchRuntime,
}

impl Tactic {
    pub const ALL: [Tactic; 4] = [
        Tactic::RecomputeOom,
        Tactic::SeqParallelOom,
        Tactic::DistOptimizerRuntime,
        Tactic::MicrobatchRuntime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tactic::RecomputeOom => "recompute-oom",
            Tactic::SeqParallelOom => "seq-parallel-oom",
            Tactic::DistOptimizerRuntime => "dist-optimizer-runtime",
            Tactic::MicrobatchRuntime => "microbatch-runtime",
        }
    }

    /// 1-based position in evaluation order.
    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

impl fmt::Display for Tactic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    MarkOom {
        tactic: Tactic,
        premise: usize,
    },
    CopyRuntime {
        tactic: Tactic,
        premise: usize,
        time: Nanos,
        mfu: f64,
    },
}

impl Verdict {
    pub fn tactic(&self) -> Tactic {
        match self {
            Verdict::MarkOom { tactic, .. } | Verdict::CopyRuntime { tactic, .. } => *tactic,
        }
    }

    pub fn premise(&self) -> usize {
        match self {
            Verdict::MarkOom { premise, .. } | Verdict::CopyRuntime { premise, .. } => *premise,
        }
    }

    pub fn outcome(&self) -> Outcome {
        match *self {
            Verdict::MarkOom { .. } => Outcome::Oom,
            Verdict::CopyRuntime { time, mfu, .. } => Outcome::Completed { time, mfu },
        }
    }
}

/// First tactic (checked in order) whose premise is in `history`.
pub fn apply_tactics(history: &[TrialRecord], candidate: &ConfigPoint) -> Option<Verdict> {
    let find = |want: ConfigPoint, oom: bool| {
        history.iter().find(|t| {
            t.config == want
                && match t.outcome {
                    Outcome::Oom => oom,
                    Outcome::Completed { .. } => !oom,
                    Outcome::Invalid(_) => false,
                }
        })
    };
    let c = *candidate;

    if !c.act_recompute {
        if let Some(t) = find(
            ConfigPoint {
                act_recompute: true,
                ..c
            },
            true,
        ) {
            return Some(Verdict::MarkOom {
                tactic: Tactic::RecomputeOom,
                premise: t.index,
            });
        }
    }
    if !c.seq_parallel {
        if let Some(t) = find(
            ConfigPoint {
                seq_parallel: true,
                ..c
            },
            true,
        ) {
            return Some(Verdict::MarkOom {
                tactic: Tactic::SeqParallelOom,
                premise: t.index,
            });
        }
    }
    let copy = |tactic, t: &TrialRecord| match t.outcome {
        Outcome::Completed { time, mfu } => Some(Verdict::CopyRuntime {
            tactic,
            premise: t.index,
            time,
            mfu,
        }),
        _ => None,
    };
    if c.dist_optimizer {
        if let Some(t) = find(
            ConfigPoint {
                dist_optimizer: false,
                ..c
            },
            false,
        ) {
            return copy(Tactic::DistOptimizerRuntime, t);
        }
    }
    if c.pp == 1 {
        // Closest smaller microbatch count.
        let prior = history
            .iter()
            .filter(|t| {
                matches!(t.outcome, Outcome::Completed { .. })
                    && t.config.micro_mult < c.micro_mult
                    && t.config
                        == ConfigPoint {
                            micro_mult: t.config.micro_mult,
                            ..c
                        }
            })
            .max_by_key(|t| (t.config.micro_mult, core::cmp::Reverse(t.index)));
        if let Some(t) = prior {
            return copy(Tactic::MicrobatchRuntime, t);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::Provenance;
    use alloc::vec;
    use alloc::vec::Vec;

    fn cfg() -> ConfigPoint {
        ConfigPoint {
            tp: 2,
            pp: 2,
            ..ConfigPoint::data_parallel(64)
        }
    }

    fn rec(index: usize, config: ConfigPoint, outcome: Outcome) -> TrialRecord {
        TrialRecord {
            index,
            config,
            outcome,
            provenance: Provenance::Simulated,
        }
    }

    #[test]
    fn empty_history_gives_nothing() {
        assert_eq!(apply_tactics(&[], &cfg()), None);
    }

    #[test]
    fn recompute_oom_implies_oom() {
        let h = vec![rec(
            0,
            ConfigPoint {
                act_recompute: true,
                ..cfg()
            },
            Outcome::Oom,
        )];
        assert_eq!(
            apply_tactics(&h, &cfg()),
            Some(Verdict::MarkOom {
                tactic: Tactic::RecomputeOom,
                premise: 0
            })
        );
        // Not the other way round.
        let h = vec![rec(0, cfg(), Outcome::Oom)];
        assert_eq!(
            apply_tactics(
                &h,
                &ConfigPoint {
                    act_recompute: true,
                    ..cfg()
                }
            ),
            None
        );
    }

    #[test]
    fn seq_parallel_oom_implies_oom() {
        let h = vec![rec(
            0,
            ConfigPoint {
                seq_parallel: true,
                ..cfg()
            },
            Outcome::Oom,
        )];
        assert_eq!(
            apply_tactics(&h, &cfg()).map(|v| v.tactic()),
            Some(Tactic::SeqParallelOom)
        );
    }

    #[test]
    fn dist_optimizer_copies_runtime() {
        let h = vec![rec(
            0,
            cfg(),
            Outcome::Completed {
                time: 100_000_000,
                mfu: 0.4,
            },
        )];
        let v = apply_tactics(
            &h,
            &ConfigPoint {
                dist_optimizer: true,
                ..cfg()
            },
        )
        .unwrap();
        assert_eq!(v.tactic(), Tactic::DistOptimizerRuntime);
        assert_eq!(v.outcome().time(), Some(100_000_000));
    }

    #[test]
    fn microbatch_copy_needs_no_pipeline() {
        let base = ConfigPoint {
            tp: 2,
            ..ConfigPoint::data_parallel(64)
        };
        let h = vec![
            rec(0, base, Outcome::Completed { time: 10, mfu: 0.5 }),
            rec(
                1,
                ConfigPoint {
                    micro_mult: 2,
                    ..base
                },
                Outcome::Completed { time: 12, mfu: 0.4 },
            ),
        ];
        let v = apply_tactics(
            &h,
            &ConfigPoint {
                micro_mult: 4,
                ..base
            },
        )
        .unwrap();
        assert_eq!(
            v,
            Verdict::CopyRuntime {
                tactic: Tactic::MicrobatchRuntime,
                premise: 1,
                time: 12,
                mfu: 0.4
            }
        );
        let piped: Vec<_> = h
            .iter()
            .map(|t| {
                rec(
                    t.index,
                    ConfigPoint { pp: 2, ..t.config },
                    t.outcome.clone(),
                )
            })
            .collect();
        assert_eq!(
            apply_tactics(
                &piped,
                &ConfigPoint {
                    pp: 2,
                    micro_mult: 4,
                    ..base
                }
            ),
            None
        );
    }

    #[test]
    fn first_tactic_wins() {
        let c = ConfigPoint {
            dist_optimizer: true,
            ..cfg()
        };
        let h = vec![
            rec(
                0,
                ConfigPoint {
                    dist_optimizer: false,
                    ..c
                },
                Outcome::Completed { time: 1, mfu: 0.1 },
            ),
            rec(
                1,
                ConfigPoint {
                    act_recompute: true,
                    ..c
                },
                Outcome::Oom,
            ),
        ];
        assert_eq!(
            apply_tactics(&h, &c).unwrap().tactic(),
            Tactic::RecomputeOom
        );
    }

    #[test]
    fn invalid_premises_are_ignored() {
        let h = vec![rec(
            0,
            ConfigPoint {
                act_recompute: true,
                ..cfg()
            },
            Outcome::Invalid("bad".into()),
        )];
        assert_eq!(apply_tactics(&h, &cfg()), None);
    }
}
