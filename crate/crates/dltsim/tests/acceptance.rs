//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each and exits non-zero if any failed.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dltsim::config::{load_cluster, load_model, load_search};
use dltsim::pool::par_map;
use dltsim_core::cluster::{ClusterSpec, DeviceClass, TopologyClass};
use dltsim_core::collator::{collate, NoTranslation};
use dltsim_core::estimator::{
    annotate, collective_estimate, Estimate, EstimateError, Estimator, KernelDesc, Roofline,
    TableEstimator,
};
use dltsim_core::format::{decode_trace, encode_trace};
use dltsim_core::frontend::schedule::{stage_steps, Pass};
use dltsim_core::frontend::{
    generate_trace, profile_mode_annotate, profile_table, unique_workers, EstimatorOracle,
    FrontendOptions, NoisyOracle, TimingOracle,
};
use dltsim_core::model::{ConfigPoint, ModelSpec, ScheduleKind};
use dltsim_core::pipeline::{predict, Launch, PipelineEvaluator, PredictOptions};
use dltsim_core::search::{enumerate_space, run_search, SearchOptions, SearchSpace, TrialStatus};
use dltsim_core::sim::{simulate, SimOptions, SimReport};
use dltsim_core::trace::*;
use dltsim_core::{Nanos, Rank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn jobs() -> usize {
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

// ---------------------------------------------------------------- helpers

/// Kernels take their `ns` attribute, copies and memsets a bytes-derived
/// time, every collective `bytes % 7919 + 1`.
struct Synthetic;

fn synthetic_duration(k: &KernelDesc<'_>) -> Nanos {
    k.attrs.get("ns").copied().unwrap_or(k.bytes_moved % 50_000)
}

impl Estimator for Synthetic {
    fn estimate_kernel(
        &self,
        k: &KernelDesc<'_>,
        _: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        Ok(Estimate::exact(synthetic_duration(k)))
    }

    fn estimate_collective(
        &self,
        _: CollectiveKind,
        bytes: u64,
        _: u32,
        _: TopologyClass,
        _: &DeviceClass,
    ) -> Result<Nanos, EstimateError> {
        Ok(bytes % 7919 + 1)
    }
}

fn replay<E: Estimator>(traces: Vec<WorkerTrace>, cluster: &ClusterSpec, est: &E) -> SimReport {
    let job = collate(traces, BTreeMap::new(), cluster, &NoTranslation).expect("collate");
    let job = annotate(job, est, &cluster.device).expect("annotate");
    simulate(&job, cluster, &SimOptions::default()).expect("simulate")
}

fn kernel(stream: u32, op_kind: &str, ns: Nanos) -> EventKind {
    let mut attrs = Attrs::new();
    attrs.insert("ns".into(), ns);
    EventKind::KernelLaunch(Kernel {
        stream: StreamId(stream),
        op_kind: op_kind.into(),
        dtype: Dtype::Bf16,
        flop_count: ns,
        bytes_moved: 1,
        attrs,
    })
}

/// A random valid single-worker trace of at most `max_events` events.
fn random_trace(rng: &mut ChaCha8Rng, max_events: usize) -> WorkerTrace {
    let mut t = WorkerTrace::new(0, 0, 0);
    t.push(EventKind::CommInit {
        comm: CommId(1),
        nranks: 1,
        my_rank: 0,
    });
    let streams = rng.random_range(1..=4u32);
    let mut versions = [0u32; 3];
    let mut live: Vec<AllocId> = Vec::new();
    let mut next_alloc = 0u64;
    let mut calls = 0u64;
    let target = rng.random_range(1..max_events);
    while t.events.len() < target {
        let s = StreamId(rng.random_range(0..streams));
        let e = rng.random_range(0..3usize);
        let kind = match rng.random_range(0..13) {
            0 | 1 => EventKind::HostGap {
                duration: rng.random_range(0..20_000),
            },
            2..=4 => kernel(s.0, "gemm.fwd", rng.random_range(0..100_000)),
            5 => EventKind::Memcpy {
                stream: s,
                direction: [CopyDirection::H2D, CopyDirection::D2H, CopyDirection::D2D]
                    [rng.random_range(0..3)],
                bytes: rng.random_range(1..1 << 24),
            },
            6 => EventKind::Memset {
                stream: s,
                bytes: rng.random_range(1..1 << 20),
            },
            7 => {
                versions[e] += 1;
                EventKind::EventRecord {
                    stream: s,
                    event: EventId(e as u32),
                    version: versions[e] - 1,
                }
            }
            8 if versions[e] > 0 => {
                let version = rng.random_range(0..versions[e]);
                EventKind::StreamWaitEvent {
                    stream: s,
                    event: EventId(e as u32),
                    version,
                }
            }
            9 if versions[e] > 0 => EventKind::EventSynchronize {
                event: EventId(e as u32),
                version: versions[e] - 1,
            },
            9 => EventKind::StreamSynchronize { stream: s },
            10 => {
                if rng.random_bool(0.2) {
                    EventKind::DeviceSynchronize
                } else {
                    calls += 1;
                    EventKind::Collective {
                        stream: s,
                        comm: CommId(1),
                        call_idx: calls - 1,
                        kind: CollectiveKind::AllReduce,
                        bytes: rng.random_range(1..1 << 30),
                        nranks: 1,
                    }
                }
            }
            11 => {
                next_alloc += 1;
                live.push(AllocId(next_alloc));
                EventKind::MemAlloc {
                    alloc: AllocId(next_alloc),
                    bytes: rng.random_range(1..1 << 30),
                }
            }
            _ if !live.is_empty() => {
                let i = rng.random_range(0..live.len());
                EventKind::MemFree {
                    alloc: live.swap_remove(i),
                }
            }
            _ => EventKind::HostGap { duration: 0 },
        };
        t.push(kind);
    }
    t
}

/// Independent reference: walks the trace once in program order keeping the
/// host clock and each stream's free time.
fn list_schedule(t: &WorkerTrace) -> Nanos {
    let mut host: Nanos = 0;
    let mut free: BTreeMap<u32, Nanos> = BTreeMap::new();
    let mut fired: BTreeMap<(u32, u32), Nanos> = BTreeMap::new();
    for ev in &t.events {
        match &ev.kind {
            EventKind::HostGap { duration } => host += duration,
            EventKind::KernelLaunch(_) | EventKind::Memcpy { .. } | EventKind::Memset { .. } => {
                let s = ev.kind.stream().unwrap().0;
                let d = synthetic_duration(&KernelDesc::from_event(&ev.kind).unwrap());
                let f = free.entry(s).or_insert(0);
                *f = (*f).max(host) + d;
            }
            EventKind::Collective { stream, bytes, .. } => {
                let f = free.entry(stream.0).or_insert(0);
                *f = (*f).max(host) + bytes % 7919 + 1;
            }
            EventKind::EventRecord {
                stream,
                event,
                version,
            } => {
                let f = free.entry(stream.0).or_insert(0);
                *f = (*f).max(host);
                fired.insert((event.0, *version), *f);
            }
            EventKind::StreamWaitEvent {
                stream,
                event,
                version,
            } => {
                let f = free.entry(stream.0).or_insert(0);
                *f = (*f).max(host).max(fired[&(event.0, *version)]);
            }
            EventKind::EventSynchronize { event, version } => {
                host = host.max(fired[&(event.0, *version)])
            }
            EventKind::StreamSynchronize { stream } => {
                host = host.max(free.get(&stream.0).copied().unwrap_or(0))
            }
            EventKind::DeviceSynchronize => {
                host = host.max(free.values().copied().max().unwrap_or(0))
            }
            EventKind::MemAlloc { .. } | EventKind::MemFree { .. } | EventKind::CommInit { .. } => {
            }
        }
    }
    free.values().copied().fold(host, Nanos::max)
}

fn one_device() -> ClusterSpec {
    ClusterSpec::new(1, 1, u64::MAX / 4, DeviceClass::fast())
}

// ------------------------------------------------------------ criteria

fn c1_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut events = 0;
    for i in 0..200 {
        let t = random_trace(&mut rng, 500);
        check(validate_trace(&t).is_empty(), || {
            format!("trace {i} is invalid")
        })?;
        events += t.events.len();
        let want = list_schedule(&t);
        let got = replay(vec![t], &one_device(), &Synthetic).total_time;
        check(got == want, || {
            format!("trace {i}: simulator {got} ns, reference {want} ns")
        })?;
    }
    Ok(format!("200 traces, {events} events, all exact"))
}

/// Forward time `tf` on the QKV projection and backward `tb` on its data
/// gradient; every other kernel and every collective is free.
struct Uniform {
    qkv_cols: u64,
    tf: Nanos,
    tb: Nanos,
}

impl Estimator for Uniform {
    fn estimate_kernel(
        &self,
        k: &KernelDesc<'_>,
        _: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        let d = match k.op_kind {
            "gemm.fwd" if k.attrs.get("n") == Some(&self.qkv_cols) => self.tf,
            "gemm.bwd_data" if k.attrs.get("k") == Some(&self.qkv_cols) => self.tb,
            "stage.fwd" => self.tf,
            "stage.bwd" => self.tb,
            _ => 0,
        };
        Ok(Estimate::exact(d))
    }

    fn estimate_collective(
        &self,
        _: CollectiveKind,
        _: u64,
        _: u32,
        _: TopologyClass,
        _: &DeviceClass,
    ) -> Result<Nanos, EstimateError> {
        Ok(0)
    }
}

/// GPipe stage traces built directly from the schedule: one kernel per pass,
/// activations and gradients exchanged as two-rank send/recv collectives.
fn gpipe_traces(p: u32, m: u64) -> Vec<WorkerTrace> {
    let link = |s: u32| CommId(100 + s as u64);
    (0..p)
        .map(|s| {
            let mut t = WorkerTrace::new(s, 0, s);
            let mut calls: BTreeMap<CommId, u64> = BTreeMap::new();
            if s > 0 {
                t.push(EventKind::CommInit {
                    comm: link(s - 1),
                    nranks: 2,
                    my_rank: 1,
                });
            }
            if s + 1 < p {
                t.push(EventKind::CommInit {
                    comm: link(s),
                    nranks: 2,
                    my_rank: 0,
                });
            }
            let mut p2p = |t: &mut WorkerTrace, comm: CommId| {
                let c = calls.entry(comm).or_insert(0);
                t.push(EventKind::Collective {
                    stream: StreamId(0),
                    comm,
                    call_idx: *c,
                    kind: CollectiveKind::SendRecv,
                    bytes: 1024,
                    nranks: 2,
                });
                *c += 1;
            };
            for step in stage_steps(ScheduleKind::GPipe, p, 1, m, s) {
                match step.pass {
                    Pass::Forward => {
                        if s > 0 {
                            p2p(&mut t, link(s - 1));
                        }
                        t.push(kernel(0, "stage.fwd", 0));
                        if s + 1 < p {
                            p2p(&mut t, link(s));
                        }
                    }
                    Pass::Backward => {
                        if s + 1 < p {
                            p2p(&mut t, link(s));
                        }
                        t.push(kernel(0, "stage.bwd", 0));
                        if s > 0 {
                            p2p(&mut t, link(s - 1));
                        }
                    }
                }
            }
            t.push(EventKind::DeviceSynchronize);
            t
        })
        .collect()
}

fn c2_pipeline_closed_form() -> Outcome {
    let (tf, tb) = (7_000, 13_000);
    let mut frontend_runs = 0;
    for p in [1u32, 2, 4, 8] {
        for m in [1u64, 2, 4, 8, 16] {
            let want = (m + p as u64 - 1) * (tf + tb);
            let cluster = ClusterSpec::new(1, p, u64::MAX / 4, DeviceClass::fast());
            let est = Uniform {
                qkv_cols: 0,
                tf,
                tb,
            };
            let got = replay(gpipe_traces(p, m), &cluster, &est).total_time;
            check(got == want, || {
                format!("hand-built p={p} m={m}: {got} ns, expected {want} ns")
            })?;

            if m % p as u64 != 0 {
                continue;
            }
            // The same shape through the workload frontend, one layer per stage.
            let model = ModelSpec {
                num_layers: p as u64,
                ..ModelSpec::tiny()
            };
            let cfg = ConfigPoint {
                pp: p,
                micro_mult: (m / p as u64) as u32,
                ..ConfigPoint::data_parallel(m)
            };
            let opts = PredictOptions {
                frontend: FrontendOptions {
                    schedule: ScheduleKind::GPipe,
                    dispatch_gap_ns: 0,
                    gap_jitter_ns: 0,
                    seed: 0,
                },
                launch: Launch::Full,
                timeline: false,
            };
            let est = Uniform {
                qkv_cols: 3 * model.hidden_size,
                tf,
                tb,
            };
            let pred = predict(&model, &cfg, &cluster, &est, &opts).map_err(|e| e.to_string())?;
            let got = pred.report.total_time;
            check(got == want, || {
                format!("frontend p={p} m={m}: {got} ns, expected {want} ns")
            })?;
            frontend_runs += 1;
        }
    }
    Ok(format!(
        "20 hand-built pipelines and {frontend_runs} frontend pipelines exact"
    ))
}

fn c3_collective_closed_form() -> Outcome {
    let d = DeviceClass::fast();
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for topo in [TopologyClass::IntraHost, TopologyClass::InterHost] {
        let link = d.link(topo);
        for n in [2u32, 4, 8, 16] {
            for e in 10..=30 {
                let s = 1u64 << e;
                let nf = n as f64;
                let formula = link.alpha_ns * 2.0 * (nf - 1.0)
                    + 2.0 * (nf - 1.0) / nf * s as f64 / link.bandwidth * 1e9;
                let got = collective_estimate(CollectiveKind::AllReduce, s, n, topo, &d);
                let diff = (got as f64 - formula).abs();
                worst = worst.max(diff);
                check(diff <= 1.0, || {
                    format!("n={n} S={s} {topo}: {got} vs {formula:.3}")
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} cases, worst deviation {worst:.3} ns"))
}

fn c4_dedup_soundness() -> Outcome {
    let space = SearchSpace {
        tp: vec![1, 2, 4],
        pp: vec![1, 2, 4],
        virtual_stages: vec![1, 2],
        micro_mult: vec![1, 2],
        act_recompute: vec![true, false],
        seq_parallel: vec![true, false],
        dist_optimizer: vec![false, true],
        global_batch: 32,
    };
    let model = ModelSpec::tiny();
    let cluster = ClusterSpec::new(2, 8, 80 << 30, DeviceClass::fast());
    let pts = enumerate_space(&space, &model, &cluster, ScheduleKind::OneFOneB)
        .map_err(|e| e.to_string())?;
    let results = par_map(&pts.valid, jobs(), |cfg| {
        let run = |launch| {
            let o = PredictOptions {
                launch,
                ..Default::default()
            };
            predict(&model, cfg, &cluster, &Roofline, &o).map_err(|e| format!("{cfg}: {e}"))
        };
        let sel = run(Launch::Selective)?;
        let full = run(Launch::Full)?;
        let post = run(Launch::PostHoc)?;
        if sel.report != full.report || post.report != full.report {
            return Err(format!(
                "{cfg}: selective {} ns, post-hoc {} ns, full {} ns",
                sel.report.total_time, post.report.total_time, full.report.total_time
            ));
        }
        Ok((sel.generated.len(), post.generated.len()))
    });
    let mut generated = 0;
    let mut posthoc = 0;
    for r in results {
        let (a, b) = r?;
        generated += a;
        posthoc += b;
    }
    let n = pts.valid.len();
    Ok(format!(
        "{n} configs identical; {generated} selective / {posthoc} post-hoc representatives of {} ranks",
        n * 16
    ))
}

fn c5_unique_worker_counts() -> Outcome {
    let m27 = ModelSpec::gpt3_2_7b();
    let c64 = ClusterSpec::new(8, 8, 80 << 30, DeviceClass::fast());
    let tp8dp8 = ConfigPoint {
        tp: 8,
        ..ConfigPoint::data_parallel(64)
    };
    let a = unique_workers(&m27, &tp8dp8, &c64).map_err(|e| e.to_string())?;
    check(a.ranks.len() == 1, || {
        format!("TP8xDP8: {} unique workers", a.ranks.len())
    })?;

    let m18 = ModelSpec::gpt3_18_4b();
    let big = ClusterSpec::new(2048, 8, 80 << 30, DeviceClass::fast());
    let tp8pp8 = ConfigPoint {
        tp: 8,
        pp: 8,
        ..ConfigPoint::data_parallel(2048)
    };
    let b = unique_workers(&m18, &tp8pp8, &big).map_err(|e| e.to_string())?;
    check(b.ranks.len() == 8, || {
        format!("TP8xPP8xDP256: {} unique workers", b.ranks.len())
    })?;
    check(b.ranks.len() + b.expansion.len() == 16384, || {
        "expansion map is not total".into()
    })?;
    Ok(format!(
        "TP8xDP8 -> {}, TP8xPP8xDP256 -> {}",
        a.ranks.len(),
        b.ranks.len()
    ))
}

fn c6_fidelity_preserving_pruning() -> Outcome {
    let model = load_model("small").map_err(|e| e.to_string())?;
    let cluster = load_cluster("tight-16").map_err(|e| e.to_string())?;
    let spec = load_search("small").map_err(|e| e.to_string())?;
    let pts = enumerate_space(&spec.space, &model, &cluster, ScheduleKind::OneFOneB)
        .map_err(|e| e.to_string())?;
    check(pts.valid.len() <= 200, || {
        format!("{} valid points", pts.valid.len())
    })?;
    let ev = PipelineEvaluator {
        model,
        cluster,
        estimator: Roofline,
        options: PredictOptions::default(),
    };

    // Ground truth: every valid point simulated.
    let truth: BTreeMap<ConfigPoint, _> = pts
        .valid
        .iter()
        .copied()
        .zip(par_map(&pts.valid, jobs(), |c| ev.evaluate_point(c)))
        .collect();
    let exhaustive = run_search(
        &spec.space,
        &pts,
        &|c: &ConfigPoint| truth[c].clone(),
        SearchOptions {
            tactics: false,
            ..Default::default()
        },
    );
    let pruned = run_search(
        &spec.space,
        &pts,
        &|c: &ConfigPoint| truth[c].clone(),
        SearchOptions::default(),
    );
    let oom = exhaustive.count(TrialStatus::Oom);
    check(oom > 0, || {
        "no configuration runs out of memory; the preset is not memory-tight".into()
    })?;

    let mut mismatches: BTreeMap<&'static str, Vec<String>> = BTreeMap::new();
    for t in pruned.trials.iter().filter(|t| t.is_pruned()) {
        let dltsim_core::search::Provenance::Inferred { tactic, .. } = t.provenance else {
            unreachable!()
        };
        let actual = &truth[&t.config];
        if *actual != t.outcome {
            if std::env::var_os("ACCEPTANCE_VERBOSE").is_some() {
                let dltsim_core::search::Provenance::Inferred { premise, .. } = t.provenance else {
                    unreachable!()
                };
                let p = &pruned.trials[premise];
                eprintln!(
                    "{}: {} <- premise {} pruned={} truth-of-premise {:?}",
                    tactic.name(),
                    t.config,
                    p.config,
                    p.is_pruned(),
                    truth[&p.config]
                );
            }
            mismatches.entry(tactic.name()).or_default().push(format!(
                "{}: inferred {:?}, simulated {:?}",
                t.config, t.outcome, actual
            ));
        }
    }
    // Each tactic's rule applied to ground-truth pairs, independent of
    // search order: (pairs, exact, optimistic) per tactic.
    let mut rules: BTreeMap<&'static str, (usize, usize, usize)> = BTreeMap::new();
    for c in &pts.valid {
        let premises = [
            (
                "recompute-oom",
                !c.act_recompute,
                ConfigPoint {
                    act_recompute: true,
                    ..*c
                },
                true,
            ),
            (
                "seq-parallel-oom",
                !c.seq_parallel,
                ConfigPoint {
                    seq_parallel: true,
                    ..*c
                },
                true,
            ),
            (
                "dist-optimizer-runtime",
                c.dist_optimizer,
                ConfigPoint {
                    dist_optimizer: false,
                    ..*c
                },
                false,
            ),
            (
                "microbatch-runtime",
                c.pp == 1 && c.micro_mult > 1,
                ConfigPoint {
                    micro_mult: c.micro_mult / 2,
                    ..*c
                },
                false,
            ),
        ];
        for (name, applies, premise, wants_oom) in premises {
            let Some(p) = truth.get(&premise).filter(|_| applies) else {
                continue;
            };
            let actual = &truth[c];
            let e = rules.entry(name).or_default();
            match (wants_oom, p) {
                (true, dltsim_core::search::Outcome::Oom) => {
                    e.0 += 1;
                    e.1 += (*actual == dltsim_core::search::Outcome::Oom) as usize;
                }
                (false, dltsim_core::search::Outcome::Completed { time, .. }) => {
                    e.0 += 1;
                    e.1 += (actual.time() == Some(*time)) as usize;
                    e.2 += actual.time().is_some_and(|t| t >= *time) as usize;
                }
                _ => {}
            }
        }
    }
    let rule_text: Vec<String> = rules
        .iter()
        .map(|(k, (n, exact, opt))| {
            if k.ends_with("oom") {
                format!("{k} {exact}/{n} exact")
            } else {
                format!("{k} {exact}/{n} exact, {opt}/{n} never faster than premise")
            }
        })
        .collect();

    let best_a = exhaustive.best().map(|t| t.config);
    let best_b = pruned.best().map(|t| t.config);
    let summary = format!(
        "{} valid, {} OOM; {} pruned ({:.1}% of simulated, {:.1}% of trials)",
        pts.valid.len(),
        oom,
        pruned.count(TrialStatus::SkippedPruned),
        pruned.pruned_fraction() * 100.0,
        pruned.count(TrialStatus::SkippedPruned) as f64 / pruned.trials.len() as f64 * 100.0
    );
    let summary = format!(
        "{summary}; rules on ground-truth pairs: {}",
        rule_text.join(", ")
    );
    check(best_a == best_b, || {
        format!("{summary}; best differs: {best_a:?} vs {best_b:?}")
    })?;
    if !mismatches.is_empty() {
        let detail: Vec<String> = mismatches
            .iter()
            .map(|(k, v)| format!("{k}: {} wrong verdicts, e.g. {}", v.len(), v[0]))
            .collect();
        return Err(format!("{summary}; same best; {}", detail.join("; ")));
    }
    Ok(format!("{summary}; same best, every verdict exact"))
}

trait EvalPoint {
    fn evaluate_point(&self, c: &ConfigPoint) -> dltsim_core::search::Outcome;
}

impl<E: Estimator> EvalPoint for PipelineEvaluator<E> {
    fn evaluate_point(&self, c: &ConfigPoint) -> dltsim_core::search::Outcome {
        dltsim_core::search::Evaluator::evaluate(self, c)
    }
}

fn c7_dp_scaling() -> Outcome {
    let base = load_cluster("scaleout-64").map_err(|e| e.to_string())?;
    let model = ModelSpec::tiny();
    let mut mfus = Vec::new();
    for dp in [1u32, 2, 4, 8] {
        let cluster = ClusterSpec {
            num_hosts: 8 * dp,
            ..base.clone()
        };
        let cfg = ConfigPoint {
            tp: 8,
            pp: 8,
            micro_mult: 2,
            ..ConfigPoint::data_parallel(16 * dp as u64)
        };
        let p = predict(
            &model,
            &cfg,
            &cluster,
            &Roofline,
            &PredictOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        mfus.push((dp, p.mfu.ok_or("OOM")?));
    }
    let text: Vec<String> = mfus
        .iter()
        .map(|(d, m)| format!("dp{d} {:.3}%", m * 100.0))
        .collect();
    check(mfus.windows(2).all(|w| w[1].1 <= w[0].1), || {
        format!("MFU increases: {}", text.join(", "))
    })?;
    Ok(text.join(", "))
}

/// Runs the timing oracle itself as an estimator.
struct OracleEstimator<O>(O);

impl<O: TimingOracle> Estimator for OracleEstimator<O> {
    fn estimate_kernel(
        &self,
        k: &KernelDesc<'_>,
        _: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        Ok(Estimate::exact(
            self.0.duration(k).expect("oracle covers every kernel"),
        ))
    }
}

fn c8_oracle_closure() -> Outcome {
    let model = ModelSpec::tiny();
    let mut checked = Vec::new();
    for (cluster, cfg) in [
        (
            ClusterSpec::new(1, 8, 80 << 30, DeviceClass::fast()),
            ConfigPoint {
                tp: 2,
                pp: 2,
                micro_mult: 2,
                ..ConfigPoint::data_parallel(16)
            },
        ),
        (
            ClusterSpec::new(2, 4, 80 << 30, DeviceClass::slow()),
            ConfigPoint {
                tp: 4,
                pp: 2,
                act_recompute: true,
                seq_parallel: true,
                ..ConfigPoint::data_parallel(8)
            },
        ),
    ] {
        let oracle = NoisyOracle {
            inner: EstimatorOracle {
                estimator: Roofline,
                device: cluster.device.clone(),
            },
            relative: 0.2,
            seed: 99,
        };
        let opts = PredictOptions {
            frontend: FrontendOptions {
                gap_jitter_ns: 1500,
                seed: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let reference = predict(
            &model,
            &cfg,
            &cluster,
            &OracleEstimator(oracle.clone()),
            &opts,
        )
        .map_err(|e| e.to_string())?;
        let timed = unique_workers(&model, &cfg, &cluster)
            .map_err(|e| e.to_string())?
            .ranks
            .iter()
            .map(|&r| {
                let t =
                    generate_trace(&model, &cfg, &cluster, &opts.frontend, r).expect("generate");
                profile_mode_annotate(&t, &oracle, &cluster.device.name).expect("profile")
            })
            .collect::<Vec<_>>();
        let table = profile_table(&timed).map_err(|e| e.to_string())?;
        let text = table.to_text();
        let reloaded =
            dltsim_core::estimator::ProfileTable::from_text(&text).map_err(|e| e.to_string())?;
        let est = TableEstimator::new(reloaded);
        let got = predict(&model, &cfg, &cluster, &est, &opts).map_err(|e| e.to_string())?;
        check(got.report.warnings.is_empty(), || {
            format!("table misses: {:?}", got.report.warnings)
        })?;
        check(got.report.total_time == reference.report.total_time, || {
            format!(
                "{cfg}: table {} ns, oracle {} ns",
                got.report.total_time, reference.report.total_time
            )
        })?;
        check(got.report == reference.report, || {
            format!("{cfg}: reports differ")
        })?;
        checked.push(format!(
            "{} rows -> {} ns",
            table.len(),
            got.report.total_time
        ));
    }
    Ok(checked.join(", "))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_dltsim"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!(
            "dltsim {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("config.toml");
    fs::write(
        &cfg,
        "tp = 2\npp = 2\nmicro_mult = 2\nglobal_batch = 32\n\n[frontend]\ngap_jitter_ns = 800\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut files = 0;
    for cmd in ["predict", "search"] {
        let mut outs = Vec::new();
        for run in 0..2 {
            let out = tmp.path().join(format!("{cmd}-{run}"));
            let out_s = out.to_str().unwrap();
            let mut args = vec![
                "--jobs",
                "1",
                cmd,
                "--model",
                "tiny",
                "--cluster",
                "fast-16",
                "--seed",
                "7",
                "--out",
                out_s,
            ];
            if cmd == "predict" {
                args.extend(["--config", cfg]);
            } else {
                args.extend(["--search-spec", "small", "--strategy", "random"]);
            }
            run_cli(&args)?;
            outs.push(dir_contents(&out));
        }
        check(!outs[0].is_empty(), || format!("{cmd} wrote nothing"))?;
        for (name, bytes) in &outs[0] {
            check(outs[1].get(name) == Some(bytes), || {
                format!("{cmd}: {name} differs between runs")
            })?;
        }
        check(outs[0].len() == outs[1].len(), || {
            format!("{cmd}: file sets differ")
        })?;
        files += outs[0].len();
    }
    Ok(format!(
        "{files} output files byte-identical across two runs"
    ))
}

fn c10_validation_suite(start: Instant) -> Outcome {
    let mut notes = Vec::new();

    // Round trip, validation and event versioning over every frontend trace
    // of the default space on 16 devices.
    let model = ModelSpec::tiny();
    let cluster = ClusterSpec::new(2, 8, 80 << 30, DeviceClass::fast());
    let space = SearchSpace::standard(64);
    let pts = enumerate_space(&space, &model, &cluster, ScheduleKind::OneFOneB)
        .map_err(|e| e.to_string())?;
    let jobs: Vec<(ConfigPoint, Rank)> = pts
        .valid
        .iter()
        .flat_map(|c| {
            unique_workers(&model, c, &cluster)
                .unwrap()
                .ranks
                .into_iter()
                .map(move |r| (*c, r))
        })
        .collect();
    let opts = FrontendOptions {
        gap_jitter_ns: 700,
        seed: 3,
        ..Default::default()
    };
    let res = par_map(&jobs, self::jobs(), |(c, r)| -> Result<(), String> {
        let t = generate_trace(&model, c, &cluster, &opts, *r).map_err(|e| e.to_string())?;
        if let Some(v) = validate_trace(&t).first() {
            return Err(format!("{c} rank {r}: {v}"));
        }
        let mut next: BTreeMap<EventId, u32> = BTreeMap::new();
        for e in &t.events {
            if let EventKind::EventRecord { event, version, .. } = e.kind {
                let n = next.entry(event).or_insert(0);
                if version != *n {
                    return Err(format!(
                        "{c} rank {r}: event {} version {version}, expected {n}",
                        event.0
                    ));
                }
                *n += 1;
            }
        }
        if decode_trace(&encode_trace(&t)).map_err(|e| e.to_string())? != t {
            return Err(format!("{c} rank {r}: round trip changed the trace"));
        }
        Ok(())
    });
    res.into_iter().collect::<Result<Vec<_>, _>>()?;
    notes.push(format!(
        "{} frontend traces round-trip and validate",
        jobs.len()
    ));

    // Overlap bound: compute on stream 0, collectives on stream 1.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let two = ClusterSpec::new(1, 2, 80 << 30, DeviceClass::fast());
    for _ in 0..100 {
        let mut traces = Vec::new();
        let n_ops = rng.random_range(1..30);
        let plan: Vec<(Nanos, u64)> = (0..n_ops)
            .map(|_| (rng.random_range(0..50_000), rng.random_range(1..1 << 20)))
            .collect();
        for r in 0..2u32 {
            let mut t = WorkerTrace::new(r, 0, r);
            t.push(EventKind::CommInit {
                comm: CommId(5),
                nranks: 2,
                my_rank: r,
            });
            for (i, &(ns, bytes)) in plan.iter().enumerate() {
                t.push(kernel(0, "gemm.fwd", ns + r as u64 * 1000));
                t.push(EventKind::Collective {
                    stream: StreamId(1),
                    comm: CommId(5),
                    call_idx: i as u64,
                    kind: CollectiveKind::AllReduce,
                    bytes,
                    nranks: 2,
                });
            }
            t.push(EventKind::DeviceSynchronize);
            traces.push(t);
        }
        // The job ends with its slowest device, so the bound holds for the
        // extremes over devices.
        let rep = replay(traces, &two, &Synthetic);
        let (mut lower, mut upper) = (0, 0);
        for d in &rep.devices {
            let c = d.compute_busy;
            let s1 = d.streams.iter().find(|s| s.stream == 1).unwrap();
            let w = s1.busy + s1.stall;
            lower = lower.max(c.max(w));
            upper = upper.max(c + w);
        }
        check(rep.total_time >= lower && rep.total_time <= upper, || {
            format!("total {} outside [{lower}, {upper}]", rep.total_time)
        })?;
    }
    notes.push("overlap bound on 100 two-stream jobs".into());

    // Conservation, no lost events and determinism on frontend jobs.
    let sample: Vec<ConfigPoint> = pts.valid.iter().step_by(25).copied().collect();
    for c in &sample {
        let o = PredictOptions {
            timeline: true,
            ..Default::default()
        };
        let a = predict(&model, c, &cluster, &Roofline, &o).map_err(|e| e.to_string())?;
        let b = predict(&model, c, &cluster, &Roofline, &o).map_err(|e| e.to_string())?;
        check(a == b, || format!("{c}: two runs differ"))?;
        check(a.report.op_arrivals == a.report.op_ends, || {
            format!(
                "{c}: {} arrivals, {} ends",
                a.report.op_arrivals, a.report.op_ends
            )
        })?;
        for d in &a.report.devices {
            for s in &d.streams {
                check(s.busy + s.stall + s.idle == a.report.total_time, || {
                    format!("{c}: rank {} stream {} does not add up", d.rank, s.stream)
                })?;
            }
        }
    }
    notes.push(format!(
        "conservation, arrivals == ends, determinism on {} jobs",
        sample.len()
    ));
    notes.push("oracle equivalence (1) and closed form (2) above".into());

    let secs = start.elapsed().as_secs_f64();
    check(secs < 600.0, || format!("acceptance run took {secs:.0} s"))?;
    notes.push(format!("acceptance run {secs:.1} s"));
    Ok(notes.join("; "))
}

type Criterion = Box<dyn Fn() -> Outcome>;

fn main() {
    let start = Instant::now();
    let criteria: Vec<(u32, &str, Criterion)> = vec![
        (
            1,
            "simulator matches the list-scheduler reference",
            Box::new(c1_oracle_equivalence),
        ),
        (2, "GPipe closed form", Box::new(c2_pipeline_closed_form)),
        (
            3,
            "ring AllReduce closed form",
            Box::new(c3_collective_closed_form),
        ),
        (
            4,
            "dedup soundness on the reduced lattice",
            Box::new(c4_dedup_soundness),
        ),
        (5, "unique-worker counts", Box::new(c5_unique_worker_counts)),
        (
            6,
            "fidelity-preserving pruning",
            Box::new(c6_fidelity_preserving_pruning),
        ),
        (7, "MFU nonincreasing in DP", Box::new(c7_dp_scaling)),
        (8, "oracle closure", Box::new(c8_oracle_closure)),
        (9, "CLI determinism", Box::new(c9_determinism)),
        (
            10,
            "validation suite",
            Box::new(move || c10_validation_suite(start)),
        ),
    ];
    let filter: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (n, name, f) in &criteria {
        if !filter.is_empty() && !filter.contains(n) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL {name} ({secs:.1}s): {detail}");
                failed.push(*n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
