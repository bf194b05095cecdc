use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layout::{Coords, P2pDir};
use super::schedule::{stage_steps, Pass, Step};
use super::{FrontendError, FrontendOptions, Plan};
use crate::cluster::ClusterSpec;
use crate::model::{ConfigPoint, ModelSpec};
use crate::trace::*;
use crate::{Nanos, Rank};

const COMPUTE: StreamId = StreamId(0);
const DP_STREAM: StreamId = StreamId(1);
const RECV_ACT: StreamId = StreamId(2);
const SEND_ACT: StreamId = StreamId(3);
const RECV_GRAD: StreamId = StreamId(4);
const SEND_GRAD: StreamId = StreamId(5);

const EV_RECV_ACT: EventId = EventId(0);
const EV_ACT_READY: EventId = EventId(1);
const EV_RECV_GRAD: EventId = EventId(2);
const EV_GRAD_OUT_READY: EventId = EventId(3);
const EV_WGRAD_READY: EventId = EventId(4);
const EV_DP_DONE: EventId = EventId(5);

/// Bytes per token id / label.
const TOKEN_BYTES: u64 = 8;
/// Bytes per parameter for gradients (fp32 accumulation).
const GRAD_BYTES: u64 = 4;
/// Bytes per parameter of Adam state (fp32 master weights, two moments).
const OPTIMIZER_BYTES: u64 = 12;

/// Generates one training iteration for `rank`.
pub fn generate_trace(
    model: &ModelSpec,
    config: &ConfigPoint,
    cluster: &ClusterSpec,
    options: &FrontendOptions,
    rank: Rank,
) -> Result<WorkerTrace, FrontendError> {
    let plan = Plan::new(model, config, cluster, options.schedule)?;
    let (host, device) = cluster.placement(rank)?;
    let mut g = Gen::new(&plan, options, rank, host, device);
    g.run();
    Ok(g.trace)
}

struct Gen<'a> {
    plan: &'a Plan,
    me: Coords,
    trace: WorkerTrace,
    gap: Nanos,
    jitter: Nanos,
    rng: ChaCha8Rng,
    versions: [u32; 6],
    calls: BTreeMap<CommId, u64>,
    sizes: BTreeMap<CommId, u32>,
    next_alloc: u64,
    activations: BTreeMap<(u64, u32), AllocId>,
    dt: u64,
    batch: u64,
    tokens: u64,
    tp: u64,
}

impl<'a> Gen<'a> {
    fn new(plan: &'a Plan, options: &FrontendOptions, rank: Rank, host: u32, device: u32) -> Self {
        let seed = options.seed ^ (rank as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Gen {
            plan,
            me: plan.layout.coords(rank),
            trace: WorkerTrace::new(rank, host, device),
            gap: options.dispatch_gap_ns,
            jitter: options.gap_jitter_ns,
            rng: ChaCha8Rng::seed_from_u64(seed),
            versions: [0; 6],
            calls: BTreeMap::new(),
            sizes: BTreeMap::new(),
            next_alloc: 0,
            activations: BTreeMap::new(),
            dt: plan.model.dtype.size_bytes(),
            batch: plan.derived.microbatch_size,
            tokens: plan.derived.microbatch_size * plan.model.seq_len,
            tp: plan.config.tp as u64,
        }
    }

    fn model(&self) -> &'a ModelSpec {
        &self.plan.model
    }

    fn cfg(&self) -> &'a ConfigPoint {
        &self.plan.config
    }

    // ---- low-level emitters ----

    fn dispatch_gap(&mut self) {
        let extra = if self.jitter > 0 {
            self.rng.random_range(0..=self.jitter)
        } else {
            0
        };
        let d = self.gap + extra;
        if d > 0 {
            self.trace.push(EventKind::HostGap { duration: d });
        }
    }

    fn kernel(&mut self, op_kind: &str, flops: u64, bytes: u64, attrs: &[(&str, u64)]) {
        self.dispatch_gap();
        let attrs = attrs.iter().map(|&(k, v)| (k.to_string(), v)).collect();
        self.trace.push(EventKind::KernelLaunch(Kernel {
            stream: COMPUTE,
            op_kind: op_kind.into(),
            dtype: self.model().dtype,
            flop_count: flops,
            bytes_moved: bytes,
            attrs,
        }));
    }

    fn gemm(&mut self, phase: &str, m: u64, n: u64, k: u64) {
        let bytes = (m * k + k * n + m * n) * self.dt;
        self.kernel(
            &format!("gemm.{phase}"),
            2 * m * n * k,
            bytes,
            &[("m", m), ("n", n), ("k", k)],
        );
    }

    /// Data and weight gradients of a forward `m×k · k×n` product.
    fn gemm_bwd(&mut self, m: u64, n: u64, k: u64) {
        self.gemm("bwd_data", m, k, n);
        self.gemm("bwd_weight", k, n, m);
    }

    fn bmm(&mut self, phase: &str, batch: u64, m: u64, n: u64, k: u64) {
        let bytes = batch * (m * k + k * n + m * n) * self.dt;
        self.kernel(
            &format!("bmm.{phase}"),
            2 * batch * m * n * k,
            bytes,
            &[("batch", batch), ("m", m), ("n", n), ("k", k)],
        );
    }

    /// Memory-bound kernel touching `elements` values `passes` times.
    fn elementwise(&mut self, family: &str, phase: &str, elements: u64, passes: u64) {
        self.kernel(
            &format!("{family}.{phase}"),
            0,
            elements * passes * self.dt,
            &[("elements", elements)],
        );
    }

    fn memcpy_h2d(&mut self, bytes: u64) {
        self.dispatch_gap();
        self.trace.push(EventKind::Memcpy {
            stream: COMPUTE,
            direction: CopyDirection::H2D,
            bytes,
        });
    }

    fn record(&mut self, stream: StreamId, event: EventId) -> (EventId, u32) {
        let v = self.versions[event.0 as usize];
        self.versions[event.0 as usize] += 1;
        self.trace.push(EventKind::EventRecord {
            stream,
            event,
            version: v,
        });
        (event, v)
    }

    fn wait(&mut self, stream: StreamId, (event, version): (EventId, u32)) {
        self.trace.push(EventKind::StreamWaitEvent {
            stream,
            event,
            version,
        });
    }

    /// Makes `to` wait for everything issued so far on `from`.
    fn fence(&mut self, from: StreamId, to: StreamId, event: EventId) {
        let e = self.record(from, event);
        self.wait(to, e);
    }

    fn comm_init(&mut self, comm: CommId, nranks: u32, my_rank: u32) {
        self.sizes.insert(comm, nranks);
        self.trace.push(EventKind::CommInit {
            comm,
            nranks,
            my_rank,
        });
    }

    fn collective(&mut self, stream: StreamId, comm: CommId, kind: CollectiveKind, bytes: u64) {
        let idx = self.calls.entry(comm).or_insert(0);
        let call_idx = *idx;
        *idx += 1;
        let nranks = self.sizes[&comm];
        self.trace.push(EventKind::Collective {
            stream,
            comm,
            call_idx,
            kind,
            bytes,
            nranks,
        });
    }

    fn alloc(&mut self, bytes: u64) -> AllocId {
        let id = AllocId(self.next_alloc);
        self.next_alloc += 1;
        self.trace.push(EventKind::MemAlloc {
            alloc: id,
            bytes: bytes.max(1),
        });
        id
    }

    fn free(&mut self, alloc: AllocId) {
        self.trace.push(EventKind::MemFree { alloc });
    }

    // ---- parallel-group helpers ----

    fn tp_comm(&self) -> Option<CommId> {
        (self.tp > 1).then(|| self.plan.layout.tp_comm(self.me.stage, self.me.dp))
    }

    fn dp_comm(&self) -> Option<CommId> {
        (self.plan.derived.dp > 1).then(|| self.plan.layout.dp_comm(self.me.stage, self.me.tp))
    }

    fn hidden_bytes(&self) -> u64 {
        self.tokens * self.model().hidden_size * self.dt
    }

    /// All-gather of the sequence-sharded hidden state (sequence parallel only).
    fn tp_gather(&mut self) {
        if let (true, Some(c)) = (self.cfg().seq_parallel, self.tp_comm()) {
            let b = self.hidden_bytes();
            self.collective(COMPUTE, c, CollectiveKind::AllGather, b);
        }
    }

    /// Reduction of row-parallel partial sums: all-reduce, or reduce-scatter
    /// under sequence parallelism.
    fn tp_reduce(&mut self) {
        if let Some(c) = self.tp_comm() {
            let kind = if self.cfg().seq_parallel {
                CollectiveKind::ReduceScatter
            } else {
                CollectiveKind::AllReduce
            };
            let b = self.hidden_bytes();
            self.collective(COMPUTE, c, kind, b);
        }
    }

    /// Gradient reduction of `params` local parameters across the
    /// data-parallel group, overlapping later backward work.
    fn dp_reduce(&mut self, params: u64) {
        let Some(c) = self.dp_comm() else { return };
        self.fence(COMPUTE, DP_STREAM, EV_WGRAD_READY);
        let bytes = params * GRAD_BYTES;
        if self.cfg().dist_optimizer {
            self.collective(DP_STREAM, c, CollectiveKind::ReduceScatter, bytes);
            self.collective(DP_STREAM, c, CollectiveKind::AllGather, bytes);
        } else {
            self.collective(DP_STREAM, c, CollectiveKind::AllReduce, bytes);
        }
    }

    fn p2p_bytes(&self) -> u64 {
        let b = self.hidden_bytes();
        if self.cfg().seq_parallel {
            b / self.tp
        } else {
            b
        }
    }

    fn prev_boundary(&self) -> u32 {
        (self.me.stage + self.plan.config.pp - 1) % self.plan.config.pp
    }

    fn p2p(&self, dir: P2pDir, boundary: u32) -> CommId {
        self.plan
            .layout
            .p2p_comm(dir, boundary, self.me.dp, self.me.tp)
    }

    // ---- model structure ----

    fn global_chunk(&self, chunk: u32) -> u32 {
        chunk * self.plan.config.pp + self.me.stage
    }

    fn is_first(&self, chunk: u32) -> bool {
        self.global_chunk(chunk) == 0
    }

    fn is_last(&self, chunk: u32) -> bool {
        self.global_chunk(chunk) + 1 == self.plan.config.pp * self.plan.config.virtual_stages
    }

    fn local_params(&self) -> u64 {
        let m = self.model();
        let v = self.plan.config.virtual_stages;
        let mut p = self.plan.derived.layers_per_chunk * v as u64 * m.layer_params_local(self.tp);
        if (0..v).any(|c| self.is_first(c)) {
            p += m.embedding_params_local(self.tp);
        }
        if (0..v).any(|c| self.is_last(c)) {
            p += m.head_params_local(self.tp);
        }
        p
    }

    fn layer_full_bytes(&self) -> u64 {
        self.model()
            .layer_activation_bytes(self.batch, self.tp, self.cfg().seq_parallel)
    }

    fn layer_ckpt_bytes(&self) -> u64 {
        self.model()
            .layer_checkpoint_bytes(self.batch, self.tp, self.cfg().seq_parallel)
    }

    fn layer_forward(&mut self, phase: &str) {
        let m = self.model();
        let (h, f, s, a, t) = (
            m.hidden_size,
            m.ffn_hidden_size,
            m.seq_len,
            m.num_heads,
            self.tp,
        );
        let tok = self.tokens;
        let local = if self.cfg().seq_parallel {
            tok / t * h
        } else {
            tok * h
        };
        let heads = self.batch * a / t;

        self.elementwise("layernorm", phase, local, 2);
        self.tp_gather();
        self.gemm(phase, tok, 3 * h / t, h);
        self.bmm(phase, heads, s, s, h / a);
        self.elementwise("softmax", phase, heads * s * s, 2);
        self.bmm(phase, heads, s, h / a, s);
        self.gemm(phase, tok, h, h / t);
        self.tp_reduce();
        self.elementwise("residual", phase, local, 3);
        self.elementwise("layernorm", phase, local, 2);
        self.tp_gather();
        self.gemm(phase, tok, f / t, h);
        self.elementwise("gelu", phase, tok * f / t, 2);
        self.gemm(phase, tok, h, f / t);
        self.tp_reduce();
        self.elementwise("residual", phase, local, 3);
    }

    fn layer_backward(&mut self) {
        let m = self.model();
        let (h, f, s, a, t) = (
            m.hidden_size,
            m.ffn_hidden_size,
            m.seq_len,
            m.num_heads,
            self.tp,
        );
        let tok = self.tokens;
        let local = if self.cfg().seq_parallel {
            tok / t * h
        } else {
            tok * h
        };
        let heads = self.batch * a / t;

        self.elementwise("residual", "bwd", local, 3);
        self.tp_gather();
        self.gemm_bwd(tok, h, f / t);
        self.elementwise("gelu", "bwd", tok * f / t, 3);
        self.gemm_bwd(tok, f / t, h);
        self.tp_reduce();
        self.elementwise("layernorm", "bwd", local, 3);
        self.elementwise("residual", "bwd", local, 3);
        self.tp_gather();
        self.gemm_bwd(tok, h, h / t);
        // context = probs · values
        self.bmm("bwd", heads, s, s, h / a);
        self.bmm("bwd", heads, s, h / a, s);
        self.elementwise("softmax", "bwd", heads * s * s, 3);
        // scores = queries · keysᵀ
        self.bmm("bwd", heads, s, h / a, s);
        self.bmm("bwd", heads, s, h / a, s);
        self.gemm_bwd(tok, 3 * h / t, h);
        self.tp_reduce();
        self.elementwise("layernorm", "bwd", local, 3);
    }

    fn head_forward(&mut self) {
        let m = self.model();
        let (h, v, t) = (m.hidden_size, m.vocab_size, self.tp);
        let tok = self.tokens;
        let local = if self.cfg().seq_parallel {
            tok / t * h
        } else {
            tok * h
        };
        self.elementwise("layernorm", "fwd", local, 2);
        self.tp_gather();
        self.gemm("fwd", tok, v / t, h);
        self.kernel(
            "cross_entropy.fwd",
            0,
            tok * v / t * 4 * 2,
            &[("elements", tok * v / t)],
        );
    }

    fn head_backward(&mut self) {
        let m = self.model();
        let (h, v, t) = (m.hidden_size, m.vocab_size, self.tp);
        let tok = self.tokens;
        let local = if self.cfg().seq_parallel {
            tok / t * h
        } else {
            tok * h
        };
        self.kernel(
            "cross_entropy.bwd",
            0,
            tok * v / t * 4 * 2,
            &[("elements", tok * v / t)],
        );
        self.gemm_bwd(tok, v / t, h);
        self.tp_reduce();
        self.elementwise("layernorm", "bwd", local, 3);
    }

    fn embedding(&mut self, phase: &str) {
        let tok = self.tokens;
        let h = self.model().hidden_size;
        self.kernel(
            &format!("embedding.{phase}"),
            0,
            tok * h * self.dt + tok * TOKEN_BYTES,
            &[("elements", tok * h)],
        );
    }

    // ---- passes ----

    fn forward(&mut self, mb: u64, chunk: u32) {
        let first = self.is_first(chunk);
        let last = self.is_last(chunk);
        if first {
            self.memcpy_h2d(self.tokens * TOKEN_BYTES);
        } else {
            let c = self.p2p(P2pDir::Forward, self.prev_boundary());
            let b = self.p2p_bytes();
            self.collective(RECV_ACT, c, CollectiveKind::SendRecv, b);
            self.fence(RECV_ACT, COMPUTE, EV_RECV_ACT);
        }

        let lc = self.plan.derived.layers_per_chunk;
        let per_layer = if self.cfg().act_recompute {
            self.layer_ckpt_bytes()
        } else {
            self.layer_full_bytes()
        };
        let head = if last {
            self.model().head_activation_bytes(self.batch, self.tp)
        } else {
            0
        };
        let act = self.alloc(lc * per_layer + head);
        self.activations.insert((mb, chunk), act);

        if first {
            self.embedding("fwd");
        }
        if last {
            self.memcpy_h2d(self.tokens * TOKEN_BYTES);
        }
        for _ in 0..lc {
            self.layer_forward("fwd");
        }
        if last {
            self.head_forward();
        } else {
            self.fence(COMPUTE, SEND_ACT, EV_ACT_READY);
            let c = self.p2p(P2pDir::Forward, self.me.stage);
            let b = self.p2p_bytes();
            self.collective(SEND_ACT, c, CollectiveKind::SendRecv, b);
        }
    }

    fn backward(&mut self, mb: u64, chunk: u32) {
        let first = self.is_first(chunk);
        let last = self.is_last(chunk);
        let final_mb = mb + 1 == self.plan.derived.microbatches;
        let layer_params = self.model().layer_params_local(self.tp);

        if last {
            self.head_backward();
            if final_mb {
                self.dp_reduce(self.model().head_params_local(self.tp));
            }
        } else {
            let c = self.p2p(P2pDir::Backward, self.me.stage);
            let b = self.p2p_bytes();
            self.collective(RECV_GRAD, c, CollectiveKind::SendRecv, b);
            self.fence(RECV_GRAD, COMPUTE, EV_RECV_GRAD);
        }

        for _ in 0..self.plan.derived.layers_per_chunk {
            let scratch = if self.cfg().act_recompute {
                let id = self.alloc(self.layer_full_bytes() - self.layer_ckpt_bytes());
                self.layer_forward("recompute");
                Some(id)
            } else {
                None
            };
            self.layer_backward();
            if let Some(id) = scratch {
                self.free(id);
            }
            if final_mb {
                self.dp_reduce(layer_params);
            }
        }

        if first {
            self.embedding("bwd");
            if final_mb {
                self.dp_reduce(self.model().embedding_params_local(self.tp));
            }
        } else {
            self.fence(COMPUTE, SEND_GRAD, EV_GRAD_OUT_READY);
            let c = self.p2p(P2pDir::Backward, self.prev_boundary());
            let b = self.p2p_bytes();
            self.collective(SEND_GRAD, c, CollectiveKind::SendRecv, b);
        }
        if let Some(act) = self.activations.remove(&(mb, chunk)) {
            self.free(act);
        }
    }

    fn run(&mut self) {
        let plan = self.plan;
        let layout = &plan.layout;

        // Communicators, in id order.
        let mut comms: BTreeMap<CommId, (u32, u32)> = BTreeMap::new();
        if let Some(c) = self.tp_comm() {
            comms.insert(c, (plan.config.tp, self.me.tp));
        }
        if let Some(c) = self.dp_comm() {
            comms.insert(c, (plan.derived.dp, self.me.dp));
        }
        let boundaries = layout.num_boundaries();
        if self.me.stage < boundaries {
            for dir in [P2pDir::Forward, P2pDir::Backward] {
                comms.insert(self.p2p(dir, self.me.stage), (2, 0));
            }
        }
        let prev = self.prev_boundary();
        if plan.config.pp > 1 && prev < boundaries {
            for dir in [P2pDir::Forward, P2pDir::Backward] {
                comms.insert(self.p2p(dir, prev), (2, 1));
            }
        }
        for (c, (n, r)) in comms {
            self.comm_init(c, n, r);
        }

        // Weights, gradients and optimizer state live for the whole iteration.
        let params = self.local_params();
        self.alloc(params * self.dt);
        self.alloc(params * GRAD_BYTES);
        let opt = if self.cfg().dist_optimizer {
            (params * OPTIMIZER_BYTES).div_ceil(plan.derived.dp as u64)
        } else {
            params * OPTIMIZER_BYTES
        };
        self.alloc(opt);
        self.dispatch_gap();
        self.trace.push(EventKind::Memset {
            stream: COMPUTE,
            bytes: params * GRAD_BYTES,
        });

        let steps = stage_steps(
            plan.schedule,
            plan.config.pp,
            plan.config.virtual_stages,
            plan.derived.microbatches,
            self.me.stage,
        );
        for Step {
            pass,
            microbatch,
            chunk,
        } in steps
        {
            match pass {
                Pass::Forward => self.forward(microbatch, chunk),
                Pass::Backward => self.backward(microbatch, chunk),
            }
        }

        if self.dp_comm().is_some() {
            self.fence(DP_STREAM, COMPUTE, EV_DP_DONE);
        }
        self.kernel(
            "optimizer.adam",
            0,
            params * (GRAD_BYTES + OPTIMIZER_BYTES + self.dt) * 2,
            &[("elements", params)],
        );
        self.trace.push(EventKind::DeviceSynchronize);
    }
}
