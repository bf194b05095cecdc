use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tactics::apply_tactics;
use super::{
    rank_trials, Enumerated, Evaluator, Outcome, Provenance, SearchOutcome, SearchSpace,
    TrialRecord,
};
use crate::model::ConfigPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Every valid point in enumeration order.
    Grid,
    /// Every valid point in a seeded random order.
    Random { seed: u64 },
    /// A (μ, λ) evolution strategy: each generation of `lambda` points is
    /// mutated from the best `mu` of the previous one by stepping a single
    /// knob to a neighbouring value.
    Evolutionary { seed: u64, mu: usize, lambda: usize },
}

impl Strategy {
    pub fn evolutionary(seed: u64) -> Self {
        Strategy::Evolutionary {
            seed,
            mu: 4,
            lambda: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub top_k: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        EarlyStop {
            window: 20,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopRule {
    /// Upper bound on history length, pruned trials included.
    pub max_trials: Option<usize>,
    pub early_stop: Option<EarlyStop>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub strategy: Strategy,
    pub tactics: bool,
    pub stop: StopRule,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            strategy: Strategy::Grid,
            tactics: true,
            stop: StopRule::default(),
        }
    }
}

/// True once the set of the `top_k` best completed configurations has not
/// changed for `window` consecutive completed trials.
pub fn early_stop(history: &[TrialRecord], window: usize, top_k: usize) -> bool {
    let mut best: Vec<(f64, ConfigPoint)> = Vec::new();
    let mut unchanged = 0usize;
    for t in history {
        let Some(mfu) = t.outcome.mfu() else { continue };
        let before: BTreeSet<ConfigPoint> = best.iter().map(|b| b.1).collect();
        best.push((mfu, t.config));
        best.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        best.truncate(top_k);
        let after: BTreeSet<ConfigPoint> = best.iter().map(|b| b.1).collect();
        if before == after {
            unchanged += 1;
        } else {
            unchanged = 0;
        }
    }
    unchanged >= window
}

enum Proposal {
    Candidate(ConfigPoint),
    Wait,
    Exhausted,
}

#[derive(Debug)]
enum Proposer {
    List {
        order: Vec<ConfigPoint>,
        cursor: usize,
    },
    Evo(Box<Evo>),
}

impl Proposer {
    fn propose(&mut self) -> Proposal {
        match self {
            Proposer::List { order, cursor } => match order.get(*cursor) {
                Some(&c) => {
                    *cursor += 1;
                    Proposal::Candidate(c)
                }
                None => Proposal::Exhausted,
            },
            Proposer::Evo(e) => e.propose(),
        }
    }

    fn observe(&mut self, config: ConfigPoint, outcome: &Outcome) {
        if let Proposer::Evo(e) = self {
            e.outstanding -= 1;
            e.generation.push((config, outcome.mfu()));
        }
    }
}

/// First `k` elements of a seeded partial shuffle.
fn sample<T: Copy>(rng: &mut ChaCha8Rng, mut items: Vec<T>, k: usize) -> Vec<T> {
    let k = k.min(items.len());
    for i in 0..k {
        let j = rng.random_range(i..items.len());
        items.swap(i, j);
    }
    items.truncate(k);
    items
}

#[derive(Debug)]
struct Evo {
    rng: ChaCha8Rng,
    mu: usize,
    lambda: usize,
    space: SearchSpace,
    valid: BTreeSet<ConfigPoint>,
    seen: BTreeSet<ConfigPoint>,
    queue: VecDeque<ConfigPoint>,
    outstanding: usize,
    generation: Vec<(ConfigPoint, Option<f64>)>,
}

impl Evo {
    fn propose(&mut self) -> Proposal {
        if let Some(c) = self.queue.pop_front() {
            self.outstanding += 1;
            return Proposal::Candidate(c);
        }
        if self.outstanding > 0 {
            return Proposal::Wait;
        }
        let mut parents: Vec<(f64, ConfigPoint)> = self
            .generation
            .drain(..)
            .filter_map(|(c, f)| f.map(|f| (f, c)))
            .collect();
        parents.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        parents.truncate(self.mu);
        let mut next = self.offspring(&parents);
        if next.is_empty() {
            // No fresh neighbours (or no viable parent): restart from random points.
            let unseen: Vec<ConfigPoint> = self.valid.difference(&self.seen).copied().collect();
            next = sample(&mut self.rng, unseen, self.lambda);
        }
        if next.is_empty() {
            return Proposal::Exhausted;
        }
        self.seen.extend(next.iter().copied());
        self.queue.extend(next);
        self.propose()
    }

    fn offspring(&mut self, parents: &[(f64, ConfigPoint)]) -> Vec<ConfigPoint> {
        let mut out: Vec<ConfigPoint> = Vec::new();
        if parents.is_empty() {
            return out;
        }
        for _ in 0..self.lambda * 20 {
            if out.len() == self.lambda {
                break;
            }
            let p = parents[self.rng.random_range(0..parents.len())].1;
            let Some(child) = self.mutate(p) else {
                continue;
            };
            if self.valid.contains(&child) && !self.seen.contains(&child) && !out.contains(&child) {
                out.push(child);
            }
        }
        out
    }

    fn mutate(&mut self, p: ConfigPoint) -> Option<ConfigPoint> {
        fn step<T: Copy + PartialEq>(rng: &mut ChaCha8Rng, list: &[T], cur: T) -> Option<T> {
            let i = list.iter().position(|&v| v == cur)?;
            let up = i + 1 < list.len();
            let down = i > 0;
            let j = match (down, up) {
                (true, true) if rng.random_bool(0.5) => i + 1,
                (true, _) => i - 1,
                (false, true) => i + 1,
                (false, false) => return None,
            };
            Some(list[j])
        }
        let rng = &mut self.rng;
        let s = &self.space;
        let mut c = p;
        match rng.random_range(0..7u32) {
            0 => c.tp = step(rng, &s.tp, p.tp)?,
            1 => c.pp = step(rng, &s.pp, p.pp)?,
            2 => c.virtual_stages = step(rng, &s.virtual_stages, p.virtual_stages)?,
            3 => c.micro_mult = step(rng, &s.micro_mult, p.micro_mult)?,
            4 => c.act_recompute = step(rng, &s.act_recompute, p.act_recompute)?,
            5 => c.seq_parallel = step(rng, &s.seq_parallel, p.seq_parallel)?,
            _ => c.dist_optimizer = step(rng, &s.dist_optimizer, p.dist_optimizer)?,
        }
        Some(c)
    }
}

/// What the caller should do next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dispatch {
    /// Evaluate `config` and report back with [`SearchDriver::complete`].
    Evaluate { ticket: u64, config: ConfigPoint },
    /// Nothing to dispatch until an in-flight trial completes.
    Wait,
    /// The search is over; call [`SearchDriver::finish`].
    Finished,
}

/// Proposes candidates, applies tactics and keeps the trial history.
#[derive(Debug)]
pub struct SearchDriver {
    proposer: Proposer,
    options: SearchOptions,
    history: Vec<TrialRecord>,
    in_flight: BTreeMap<u64, ConfigPoint>,
    next_ticket: u64,
    stopped_early: bool,
}

impl SearchDriver {
    pub fn new(space: &SearchSpace, points: &Enumerated, options: SearchOptions) -> Self {
        let proposer = match options.strategy {
            Strategy::Grid => Proposer::List {
                order: points.valid.clone(),
                cursor: 0,
            },
            Strategy::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = points.valid.len();
                Proposer::List {
                    order: sample(&mut rng, points.valid.clone(), n),
                    cursor: 0,
                }
            }
            Strategy::Evolutionary { seed, mu, lambda } => Proposer::Evo(Box::new(Evo {
                rng: ChaCha8Rng::seed_from_u64(seed),
                mu: mu.max(1),
                lambda: lambda.max(1),
                space: space.clone(),
                valid: points.valid.iter().copied().collect(),
                seen: BTreeSet::new(),
                queue: VecDeque::new(),
                outstanding: 0,
                generation: Vec::new(),
            })),
        };
        SearchDriver {
            proposer,
            options,
            history: Vec::new(),
            in_flight: BTreeMap::new(),
            next_ticket: 0,
            stopped_early: false,
        }
    }

    pub fn history(&self) -> &[TrialRecord] {
        &self.history
    }

    fn should_stop(&mut self) -> bool {
        let stop = self.options.stop;
        if let Some(max) = stop.max_trials {
            if self.history.len() + self.in_flight.len() >= max {
                return true;
            }
        }
        if let Some(es) = stop.early_stop {
            if early_stop(&self.history, es.window, es.top_k) {
                self.stopped_early = true;
                return true;
            }
        }
        false
    }

    fn idle(&self) -> Dispatch {
        if self.in_flight.is_empty() {
            Dispatch::Finished
        } else {
            Dispatch::Wait
        }
    }

    fn append(&mut self, config: ConfigPoint, outcome: Outcome, provenance: Provenance) {
        self.proposer.observe(config, &outcome);
        let index = self.history.len();
        self.history.push(TrialRecord {
            index,
            config,
            outcome,
            provenance,
        });
    }

    pub fn next_dispatch(&mut self) -> Dispatch {
        loop {
            if self.should_stop() {
                return self.idle();
            }
            let config = match self.proposer.propose() {
                Proposal::Candidate(c) => c,
                Proposal::Wait => return Dispatch::Wait,
                Proposal::Exhausted => return self.idle(),
            };
            if self.options.tactics {
                if let Some(v) = apply_tactics(&self.history, &config) {
                    self.append(
                        config,
                        v.outcome(),
                        Provenance::Inferred {
                            tactic: v.tactic(),
                            premise: v.premise(),
                        },
                    );
                    continue;
                }
            }
            let ticket = self.next_ticket;
            self.next_ticket += 1;
            self.in_flight.insert(ticket, config);
            return Dispatch::Evaluate { ticket, config };
        }
    }

    /// Records the outcome of a dispatched trial.
    ///
    /// # Panics
    /// If `ticket` is not in flight.
    pub fn complete(&mut self, ticket: u64, outcome: Outcome) {
        let config = self.in_flight.remove(&ticket).expect("ticket is in flight");
        self.append(config, outcome, Provenance::Simulated);
    }

    pub fn finish(self) -> SearchOutcome {
        assert!(
            self.in_flight.is_empty(),
            "search finished with trials in flight"
        );
        SearchOutcome {
            ranking: rank_trials(&self.history),
            trials: self.history,
            stopped_early: self.stopped_early,
        }
    }
}

/// Batch-synchronous loop: dispatches up to `batch` trials, evaluates them
/// with `eval` (which may do so concurrently) and records the results in
/// dispatch order. With a fixed batch size the result is deterministic.
pub fn run_batches<F>(mut driver: SearchDriver, batch: usize, mut eval: F) -> SearchOutcome
where
    F: FnMut(&[ConfigPoint]) -> Vec<Outcome>,
{
    let batch = batch.max(1);
    loop {
        let mut tickets = Vec::new();
        let mut configs = Vec::new();
        while tickets.len() < batch {
            match driver.next_dispatch() {
                Dispatch::Evaluate { ticket, config } => {
                    tickets.push(ticket);
                    configs.push(config);
                }
                Dispatch::Wait | Dispatch::Finished => break,
            }
        }
        if tickets.is_empty() {
            return driver.finish();
        }
        let outcomes = eval(&configs);
        assert_eq!(
            outcomes.len(),
            tickets.len(),
            "one outcome per dispatched trial"
        );
        for (t, o) in tickets.into_iter().zip(outcomes) {
            driver.complete(t, o);
        }
    }
}

/// Serial search.
pub fn run_search<E: Evaluator + ?Sized>(
    space: &SearchSpace,
    points: &Enumerated,
    evaluator: &E,
    options: SearchOptions,
) -> SearchOutcome {
    let driver = SearchDriver::new(space, points, options);
    run_batches(driver, 1, |cs| {
        cs.iter().map(|c| evaluator.evaluate(c)).collect()
    })
}
