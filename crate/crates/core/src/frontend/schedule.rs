//! Per-stage order of forward and backward passes.

use alloc::vec::Vec;

use crate::model::ScheduleKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pass {
    Forward,
    Backward,
}

/// One pass of one microbatch through one of the stage's model chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Step {
    pub pass: Pass,
    pub microbatch: u64,
    pub chunk: u32,
}

impl Step {
    fn fwd(microbatch: u64, chunk: u32) -> Self {
        Step {
            pass: Pass::Forward,
            microbatch,
            chunk,
        }
    }

    fn bwd(microbatch: u64, chunk: u32) -> Self {
        Step {
            pass: Pass::Backward,
            microbatch,
            chunk,
        }
    }
}

/// Passes executed by `stage` of a `pp`-stage pipeline with `chunks`
/// model chunks per stage and `m` microbatches.
///
/// * GPipe: every forward, then every backward.
/// * 1F1B: `min(pp − stage − 1, m)` warmup forwards, then alternating
///   forward/backward, then the remaining backwards.
/// * Interleaved 1F1B: the same shape over `m·chunks` virtual passes, with
///   `(pp − stage − 1)·2 + (chunks − 1)·pp` warmup passes; microbatches are
///   visited in groups of `pp`, cycling through chunks (backwards visit
///   chunks in reverse). Requires `m` to be a multiple of `pp`; when
///   `m == pp` every forward runs before any backward.
pub fn stage_steps(kind: ScheduleKind, pp: u32, chunks: u32, m: u64, stage: u32) -> Vec<Step> {
    match kind {
        ScheduleKind::GPipe => {
            let mut out: Vec<Step> = (0..m).map(|i| Step::fwd(i, 0)).collect();
            out.extend((0..m).map(|i| Step::bwd(i, 0)));
            out
        }
        ScheduleKind::OneFOneB => {
            let warmup = ((pp - stage - 1) as u64).min(m);
            one_f_one_b(m, warmup, |k| Step::fwd(k, 0), |k| Step::bwd(k, 0))
        }
        ScheduleKind::InterleavedOneFOneB => {
            let total = m * chunks as u64;
            let warmup = if m == pp as u64 {
                total
            } else {
                (((pp - stage - 1) * 2 + (chunks - 1) * pp) as u64).min(total)
            };
            let (pp64, v) = (pp as u64, chunks as u64);
            let mb = move |k: u64| (k / (pp64 * v)) * pp64 + k % pp64;
            let chunk = move |k: u64| ((k % (pp64 * v)) / pp64) as u32;
            one_f_one_b(
                total,
                warmup,
                |k| Step::fwd(mb(k), chunk(k)),
                |k| Step::bwd(mb(k), chunks - 1 - chunk(k)),
            )
        }
    }
}

fn one_f_one_b(
    total: u64,
    warmup: u64,
    f: impl Fn(u64) -> Step,
    b: impl Fn(u64) -> Step,
) -> Vec<Step> {
    let mut out = Vec::with_capacity(2 * total as usize);
    out.extend((0..warmup).map(&f));
    for i in 0..total - warmup {
        out.push(f(warmup + i));
        out.push(b(i));
    }
    out.extend((total - warmup..total).map(&b));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn check_complete(steps: &[Step], m: u64, chunks: u32) {
        let mut f = BTreeSet::new();
        let mut b = BTreeSet::new();
        for s in steps {
            let set = if s.pass == Pass::Forward {
                &mut f
            } else {
                &mut b
            };
            assert!(set.insert((s.microbatch, s.chunk)), "{s:?} repeated");
            if s.pass == Pass::Backward {
                assert!(
                    f.contains(&(s.microbatch, s.chunk)),
                    "{s:?} before its forward"
                );
            }
        }
        assert_eq!(f.len() as u64, m * chunks as u64);
        assert_eq!(b.len() as u64, m * chunks as u64);
    }

    #[test]
    fn all_schedules_cover_every_pass_once() {
        for pp in [1u32, 2, 4, 8] {
            for mm in [1u64, 2, 3] {
                let m = mm * pp as u64;
                for stage in 0..pp {
                    check_complete(&stage_steps(ScheduleKind::GPipe, pp, 1, m, stage), m, 1);
                    check_complete(&stage_steps(ScheduleKind::OneFOneB, pp, 1, m, stage), m, 1);
                    if pp > 1 {
                        for v in [2, 4] {
                            check_complete(
                                &stage_steps(ScheduleKind::InterleavedOneFOneB, pp, v, m, stage),
                                m,
                                v,
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn one_f_one_b_warmup_bound() {
        for pp in [2u32, 4, 8] {
            for stage in 0..pp {
                let steps = stage_steps(ScheduleKind::OneFOneB, pp, 1, 3 * pp as u64, stage);
                let mut in_flight: i64 = 0;
                for s in steps {
                    in_flight += if s.pass == Pass::Forward { 1 } else { -1 };
                    assert!(in_flight <= (pp - stage) as i64);
                }
            }
        }
    }

    #[test]
    fn interleaved_order_example() {
        let steps = stage_steps(ScheduleKind::InterleavedOneFOneB, 2, 2, 4, 1);
        // warmup = 0·2 + 1·2 = 2
        assert_eq!(steps[0], Step::fwd(0, 0));
        assert_eq!(steps[1], Step::fwd(1, 0));
        assert_eq!(steps[2], Step::fwd(0, 1));
        assert_eq!(steps[3], Step::bwd(0, 1));
    }
}
