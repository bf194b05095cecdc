//! Rank layout and communicator naming for 3D-parallel jobs.
//!
//! Ranks are laid out tensor-parallel fastest, then data-parallel, then
//! pipeline: `rank = stage·(dp·tp) + dp_idx·tp + tp_idx`. With host-major
//! placement this keeps tensor-parallel groups inside a host whenever `tp`
//! divides the host size.
//!
//! Communicator ids encode their role: the top bits hold a tag (tensor,
//! data, forward or backward point-to-point) and the low 40 bits an index.

use alloc::vec::Vec;

use crate::collator::GroupTranslator;
use crate::model::ConfigPoint;
use crate::trace::CommId;
use crate::Rank;

const TAG_SHIFT: u32 = 40;
const TAG_TP: u64 = 1;
const TAG_DP: u64 = 2;
const TAG_P2P_FWD: u64 = 3;
const TAG_P2P_BWD: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coords {
    pub stage: u32,
    pub dp: u32,
    pub tp: u32,
}

/// Direction of activation traffic across a pipeline boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum P2pDir {
    /// Activations, from stage `b` to stage `b+1`.
    Forward,
    /// Gradients, from stage `b+1` back to stage `b`.
    Backward,
}

/// What a communicator is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CommRole {
    Tensor {
        stage: u32,
        dp: u32,
    },
    Data {
        stage: u32,
        tp: u32,
    },
    /// Two-member group across boundary `boundary` (between stage
    /// `boundary` and stage `(boundary+1) % pp`). Member 0 is the lower stage.
    PointToPoint {
        dir: P2pDir,
        boundary: u32,
        dp: u32,
        tp: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParallelLayout {
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
    /// Interleaved schedules also connect the last stage back to the first.
    pub wrap: bool,
}

impl ParallelLayout {
    pub fn new(config: &ConfigPoint, dp: u32) -> Self {
        ParallelLayout {
            tp: config.tp,
            pp: config.pp,
            dp,
            wrap: config.virtual_stages > 1,
        }
    }

    pub fn num_ranks(&self) -> u32 {
        self.tp * self.pp * self.dp
    }

    pub fn coords(&self, rank: Rank) -> Coords {
        let per_stage = self.dp * self.tp;
        Coords {
            stage: rank / per_stage,
            dp: (rank % per_stage) / self.tp,
            tp: rank % self.tp,
        }
    }

    pub fn rank(&self, c: Coords) -> Rank {
        c.stage * self.dp * self.tp + c.dp * self.tp + c.tp
    }

    /// Lowest rank of `rank`'s pipeline stage; all ranks of a stage issue
    /// the same kernel sequence.
    pub fn representative(&self, rank: Rank) -> Rank {
        self.rank(Coords {
            stage: self.coords(rank).stage,
            dp: 0,
            tp: 0,
        })
    }

    /// Number of pipeline boundaries that carry traffic.
    pub fn num_boundaries(&self) -> u32 {
        if self.pp == 1 {
            0
        } else if self.wrap {
            self.pp
        } else {
            self.pp - 1
        }
    }

    pub fn tp_comm(&self, stage: u32, dp: u32) -> CommId {
        comm(TAG_TP, stage as u64 * self.dp as u64 + dp as u64)
    }

    pub fn dp_comm(&self, stage: u32, tp: u32) -> CommId {
        comm(TAG_DP, stage as u64 * self.tp as u64 + tp as u64)
    }

    pub fn p2p_comm(&self, dir: P2pDir, boundary: u32, dp: u32, tp: u32) -> CommId {
        let tag = match dir {
            P2pDir::Forward => TAG_P2P_FWD,
            P2pDir::Backward => TAG_P2P_BWD,
        };
        comm(
            tag,
            (boundary as u64 * self.dp as u64 + dp as u64) * self.tp as u64 + tp as u64,
        )
    }

    pub fn role(&self, comm: CommId) -> Option<CommRole> {
        let tag = comm.0 >> TAG_SHIFT;
        let idx = comm.0 & ((1 << TAG_SHIFT) - 1);
        let (tp, dp) = (self.tp as u64, self.dp as u64);
        let role = match tag {
            TAG_TP => {
                let stage = idx / dp;
                (stage < self.pp as u64).then_some(CommRole::Tensor {
                    stage: stage as u32,
                    dp: (idx % dp) as u32,
                })?
            }
            TAG_DP => {
                let stage = idx / tp;
                (stage < self.pp as u64).then_some(CommRole::Data {
                    stage: stage as u32,
                    tp: (idx % tp) as u32,
                })?
            }
            TAG_P2P_FWD | TAG_P2P_BWD => {
                let boundary = idx / (dp * tp);
                if boundary >= self.num_boundaries() as u64 {
                    return None;
                }
                CommRole::PointToPoint {
                    dir: if tag == TAG_P2P_FWD {
                        P2pDir::Forward
                    } else {
                        P2pDir::Backward
                    },
                    boundary: boundary as u32,
                    dp: ((idx / tp) % dp) as u32,
                    tp: (idx % tp) as u32,
                }
            }
            _ => return None,
        };
        Some(role)
    }

    /// Members of a communicator ordered by their rank within it.
    pub fn members(&self, comm: CommId) -> Option<Vec<Rank>> {
        Some(match self.role(comm)? {
            CommRole::Tensor { stage, dp } => (0..self.tp)
                .map(|tp| self.rank(Coords { stage, dp, tp }))
                .collect(),
            CommRole::Data { stage, tp } => (0..self.dp)
                .map(|dp| self.rank(Coords { stage, dp, tp }))
                .collect(),
            CommRole::PointToPoint {
                boundary, dp, tp, ..
            } => {
                let lo = self.rank(Coords {
                    stage: boundary,
                    dp,
                    tp,
                });
                let hi = self.rank(Coords {
                    stage: (boundary + 1) % self.pp,
                    dp,
                    tp,
                });
                alloc::vec![lo, hi]
            }
        })
    }

    /// Every communicator of the job.
    pub fn all_comms(&self) -> Vec<CommId> {
        let mut out = Vec::new();
        for stage in 0..self.pp {
            if self.tp > 1 {
                out.extend((0..self.dp).map(|dp| self.tp_comm(stage, dp)));
            }
            if self.dp > 1 {
                out.extend((0..self.tp).map(|tp| self.dp_comm(stage, tp)));
            }
        }
        for b in 0..self.num_boundaries() {
            for dir in [P2pDir::Forward, P2pDir::Backward] {
                for dp in 0..self.dp {
                    out.extend((0..self.tp).map(|tp| self.p2p_comm(dir, b, dp, tp)));
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn comm(tag: u64, idx: u64) -> CommId {
    CommId(tag << TAG_SHIFT | idx)
}

impl GroupTranslator for ParallelLayout {
    /// A duplicate takes the group of the same kind that contains it. For
    /// point-to-point groups the boundary shifts by the stage offset between
    /// the two ranks, so a duplicate keeps the representative's side.
    fn translate(&self, comm: CommId, representative: Rank, rank: Rank) -> Option<(CommId, u32)> {
        if representative >= self.num_ranks() || rank >= self.num_ranks() {
            return None;
        }
        let r = self.coords(representative);
        let d = self.coords(rank);
        match self.role(comm)? {
            CommRole::Tensor { stage, dp } if (stage, dp) == (r.stage, r.dp) => {
                Some((self.tp_comm(d.stage, d.dp), d.tp))
            }
            CommRole::Data { stage, tp } if (stage, tp) == (r.stage, r.tp) => {
                Some((self.dp_comm(d.stage, d.tp), d.dp))
            }
            CommRole::PointToPoint {
                dir,
                boundary,
                dp,
                tp,
            } if (dp, tp) == (r.dp, r.tp) => {
                let pp = self.pp;
                let side = if r.stage == boundary {
                    0
                } else if r.stage == (boundary + 1) % pp {
                    1
                } else {
                    return None;
                };
                let shifted = (boundary + pp - r.stage + d.stage) % pp;
                if shifted >= self.num_boundaries() {
                    return None;
                }
                Some((self.p2p_comm(dir, shifted, d.dp, d.tp), side))
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn layout(tp: u32, pp: u32, dp: u32, wrap: bool) -> ParallelLayout {
        ParallelLayout { tp, pp, dp, wrap }
    }

    #[test]
    fn coords_round_trip() {
        let l = layout(2, 4, 3, false);
        for r in 0..l.num_ranks() {
            assert_eq!(l.rank(l.coords(r)), r);
        }
        assert_eq!(
            l.coords(7),
            Coords {
                stage: 1,
                dp: 0,
                tp: 1
            }
        );
        assert_eq!(l.representative(7), 6);
    }

    #[test]
    fn roles_round_trip() {
        let l = layout(2, 3, 2, true);
        for c in l.all_comms() {
            let members = l.members(c).unwrap();
            assert!(members.len() >= 2);
            assert!(members.iter().all(|&m| m < l.num_ranks()));
        }
        assert_eq!(l.all_comms().len(), 3 * 2 + 3 * 2 + 3 * 2 * 4);
    }

    #[test]
    fn translation_hits_the_right_group() {
        let l = layout(2, 4, 2, true);
        for comm in l.all_comms() {
            let members = l.members(comm).unwrap();
            for (my, &rep) in members.iter().enumerate() {
                if l.representative(rep) != rep {
                    continue;
                }
                for dup in 0..l.num_ranks() {
                    if l.representative(dup) != rep {
                        continue;
                    }
                    let (to, my_rank) = l.translate(comm, rep, dup).unwrap();
                    assert_eq!(
                        my_rank as usize,
                        if matches!(l.role(comm), Some(CommRole::PointToPoint { .. })) {
                            my
                        } else {
                            l.members(to)
                                .unwrap()
                                .iter()
                                .position(|&m| m == dup)
                                .unwrap()
                        }
                    );
                    assert_eq!(l.members(to).unwrap()[my_rank as usize], dup);
                }
            }
        }
    }

    #[test]
    fn every_group_has_a_representative_member() {
        let l = layout(4, 2, 2, false);
        let reps: BTreeSet<Rank> = (0..l.num_ranks()).map(|r| l.representative(r)).collect();
        assert_eq!(reps.len(), 2);
        assert!(l.role(CommId(99)).is_none());
    }
}
