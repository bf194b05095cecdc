//! JSON and text reports for predictions and searches.

use std::fmt::Write as _;

use dltsim_core::cluster::ClusterSpec;
use dltsim_core::model::{ConfigPoint, ModelSpec};
use dltsim_core::pipeline::Prediction;
use dltsim_core::search::{
    Enumerated, Outcome, Provenance, SearchOutcome, TrialRecord, TrialStatus,
};
use dltsim_core::sim::SimReport;
use dltsim_core::Rank;
use serde::Serialize;

const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Serialize)]
pub struct PredictionReport<'a> {
    pub model: &'a ModelSpec,
    pub cluster: &'a ClusterSpec,
    pub config: ConfigPoint,
    pub schedule: &'static str,
    pub estimator: &'a str,
    pub seed: u64,
    pub microbatches: u64,
    pub dp: u32,
    pub generated_ranks: &'a [Rank],
    pub total_time_ns: u64,
    pub model_flops: u64,
    pub mfu: Option<f64>,
    pub exposed_comm_fraction: f64,
    pub peak_memory_bytes: u64,
    pub oom: bool,
    /// Simulator output; the timeline is exported separately.
    pub sim: SimReport,
}

impl<'a> PredictionReport<'a> {
    pub fn new(
        model: &'a ModelSpec,
        cluster: &'a ClusterSpec,
        config: ConfigPoint,
        estimator: &'a str,
        seed: u64,
        p: &'a Prediction,
    ) -> Self {
        let mut sim = p.report.clone();
        sim.timeline = None;
        PredictionReport {
            model,
            cluster,
            config,
            schedule: p.plan.schedule.name(),
            estimator,
            seed,
            microbatches: p.plan.derived.microbatches,
            dp: p.plan.derived.dp,
            generated_ranks: &p.generated,
            total_time_ns: p.report.total_time,
            model_flops: p.model_flops,
            mfu: p.mfu,
            exposed_comm_fraction: p.report.exposed_comm_fraction(),
            peak_memory_bytes: p.report.peak_memory(),
            oom: p.report.is_oom(),
            sim,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

pub fn config_label(c: &ConfigPoint) -> String {
    format!(
        "tp{} pp{} v{} mm{} rc={} sp={} do={} gb{}",
        c.tp,
        c.pp,
        c.virtual_stages,
        c.micro_mult,
        c.act_recompute as u8,
        c.seq_parallel as u8,
        c.dist_optimizer as u8,
        c.global_batch
    )
}

/// Human-readable one-screen summary of a prediction.
pub fn summary_text(r: &PredictionReport<'_>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model          {}", r.model.name);
    let _ = writeln!(
        s,
        "cluster        {} hosts x {} devices ({})",
        r.cluster.num_hosts, r.cluster.devices_per_host, r.cluster.device.name
    );
    let _ = writeln!(
        s,
        "config         {} (dp {}, {} microbatches, {})",
        config_label(&r.config),
        r.dp,
        r.microbatches,
        r.schedule
    );
    let _ = writeln!(s, "estimator      {}", r.estimator);
    let _ = writeln!(
        s,
        "generated      {} of {} ranks",
        r.generated_ranks.len(),
        r.sim.devices.len()
    );
    let _ = writeln!(s, "iteration time {:.3} ms", r.total_time_ns as f64 / 1e6);
    match r.mfu {
        Some(m) => {
            let _ = writeln!(s, "MFU            {:.2}%", m * 100.0);
        }
        None => {
            let _ = writeln!(s, "MFU            n/a");
        }
    }
    let _ = writeln!(s, "exposed comm   {:.2}%", r.exposed_comm_fraction * 100.0);
    let _ = writeln!(
        s,
        "peak memory    {:.2} GiB of {:.2} GiB",
        r.peak_memory_bytes as f64 / GIB,
        r.cluster.memory_capacity as f64 / GIB
    );
    match &r.sim.oom {
        Some(o) => {
            let _ = writeln!(
                s,
                "OOM            yes (rank {} at seq {}: {:.2} GiB allocated)",
                o.rank,
                o.seq,
                o.allocated as f64 / GIB
            );
        }
        None => {
            let _ = writeln!(s, "OOM            no");
        }
    }
    for w in &r.sim.warnings {
        let _ = writeln!(s, "warning        {w}");
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct StatusCounts {
    pub completed: usize,
    pub oom: usize,
    pub pruned: usize,
    pub invalid: usize,
    /// Points of the lattice rejected before the search started.
    pub excluded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankedRow<'a> {
    pub rank: usize,
    pub trial: usize,
    pub config: ConfigPoint,
    pub status: &'static str,
    #[serde(flatten)]
    pub outcome: &'a Outcome,
    pub provenance: &'a Provenance,
}

#[derive(Debug, Clone, Serialize)]
pub struct SearchReport<'a> {
    pub model: &'a str,
    pub cluster: &'a ClusterSpec,
    pub strategy: &'a str,
    pub tactics: bool,
    pub seed: u64,
    pub counts: StatusCounts,
    pub pruned_fraction: f64,
    pub stopped_early: bool,
    pub best: Option<&'a TrialRecord>,
    pub ranking: Vec<RankedRow<'a>>,
}

impl<'a> SearchReport<'a> {
    pub fn new(
        model: &'a str,
        cluster: &'a ClusterSpec,
        strategy: &'a str,
        tactics: bool,
        seed: u64,
        points: &Enumerated,
        out: &'a SearchOutcome,
    ) -> Self {
        let counts = StatusCounts {
            completed: out.count(TrialStatus::Completed),
            oom: out.count(TrialStatus::Oom),
            pruned: out.count(TrialStatus::SkippedPruned),
            invalid: out.count(TrialStatus::Invalid),
            excluded: points.excluded.len(),
        };
        let ranking = out
            .ranking
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let tr = &out.trials[t];
                RankedRow {
                    rank: i + 1,
                    trial: t,
                    config: tr.config,
                    status: tr.status().name(),
                    outcome: &tr.outcome,
                    provenance: &tr.provenance,
                }
            })
            .collect();
        SearchReport {
            model,
            cluster,
            strategy,
            tactics,
            seed,
            counts,
            pruned_fraction: out.pruned_fraction(),
            stopped_early: out.stopped_early,
            best: out.best(),
            ranking,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Fixed-width ranked table plus the status breakdown.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>4}  {:>5}  {:<44}  {:>12}  {:>7}  {:<9}  source",
            "rank", "trial", "config", "time_ms", "mfu_%", "status"
        );
        for r in &self.ranking {
            let (time, mfu) = match r.outcome {
                Outcome::Completed { time, mfu } => (
                    format!("{:.3}", *time as f64 / 1e6),
                    format!("{:.2}", mfu * 100.0),
                ),
                _ => ("-".into(), "-".into()),
            };
            let source = match r.provenance {
                Provenance::Simulated => "simulated".to_string(),
                Provenance::Inferred { tactic, premise } => {
                    format!("{} from trial {premise}", tactic.name())
                }
            };
            let _ = writeln!(
                s,
                "{:>4}  {:>5}  {:<44}  {:>12}  {:>7}  {:<9}  {source}",
                r.rank,
                r.trial,
                config_label(&r.config),
                time,
                mfu,
                r.status
            );
        }
        let c = &self.counts;
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "trials {}: completed {}, oom {}, pruned {}, invalid {}; excluded before search {}",
            self.ranking.len(),
            c.completed,
            c.oom,
            c.pruned,
            c.invalid,
            c.excluded
        );
        let _ = writeln!(s, "pruned/simulated {:.1}%", self.pruned_fraction * 100.0);
        if self.stopped_early {
            let _ = writeln!(s, "stopped early: top configurations unchanged");
        }
        match self.best {
            Some(b) => {
                let _ = writeln!(
                    s,
                    "best {} ({:.2}% MFU)",
                    config_label(&b.config),
                    b.outcome.mfu().unwrap_or(0.0) * 100.0
                );
            }
            None => {
                let _ = writeln!(s, "best none (no trial completed)");
            }
        }
        s
    }
}
