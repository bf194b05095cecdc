//! Model shapes, training-configuration points and the analytical FLOP
//! accounting shared by the frontend and MFU computation.
//!
//! FLOPs follow the usual dense-transformer accounting: per layer and sample,
//! the QKV, projection and two MLP GEMMs cost `2·s·h·(4h + 2f)` and the two
//! attention batched GEMMs `4·s²·h`, where `s` is the sequence length, `h`
//! the hidden size and `f` the MLP width. The output projection adds
//! `2·s·h·V`. Backward is twice forward, so an iteration costs three times
//! the forward FLOPs (plus one extra forward of the transformer layers when
//! activations are recomputed). Memory-bound kernels carry no FLOPs.

use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Dtype;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: alloc::string::String,
    pub num_layers: u64,
    pub hidden_size: u64,
    pub num_heads: u64,
    pub ffn_hidden_size: u64,
    pub seq_len: u64,
    pub vocab_size: u64,
    pub dtype: Dtype,
}

impl ModelSpec {
    /// GPT-3 2.7B shapes.
    pub fn gpt3_2_7b() -> Self {
        ModelSpec {
            name: "gpt3-2.7b".into(),
            num_layers: 32,
            hidden_size: 2560,
            num_heads: 32,
            ffn_hidden_size: 10240,
            seq_len: 2048,
            vocab_size: 51200,
            dtype: Dtype::Bf16,
        }
    }

    /// GPT-3 18.4B shapes.
    pub fn gpt3_18_4b() -> Self {
        ModelSpec {
            name: "gpt3-18.4b".into(),
            num_layers: 40,
            hidden_size: 6144,
            num_heads: 48,
            ffn_hidden_size: 24576,
            seq_len: 2048,
            vocab_size: 51200,
            dtype: Dtype::Bf16,
        }
    }

    /// Small model for tests and examples.
    pub fn tiny() -> Self {
        ModelSpec {
            name: "tiny".into(),
            num_layers: 8,
            hidden_size: 512,
            num_heads: 8,
            ffn_hidden_size: 2048,
            seq_len: 256,
            vocab_size: 1024,
            dtype: Dtype::Bf16,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ffn_hidden_size", self.ffn_hidden_size),
            ("seq_len", self.seq_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(ConfigError::ZeroDimension(name));
            }
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(ConfigError::HeadsNotDividingHidden {
                hidden: self.hidden_size,
                heads: self.num_heads,
            });
        }
        Ok(())
    }

    /// Forward FLOPs of one transformer layer over `batch` samples.
    pub fn flops_per_layer_fwd(&self, batch: u64) -> u64 {
        let (s, h, f) = (self.seq_len, self.hidden_size, self.ffn_hidden_size);
        batch * (2 * s * h * (4 * h + 2 * f) + 4 * s * s * h)
    }

    /// Forward FLOPs of the output (vocabulary) projection over `batch` samples.
    pub fn flops_logits_fwd(&self, batch: u64) -> u64 {
        2 * batch * self.seq_len * self.hidden_size * self.vocab_size
    }

    /// Model FLOPs of one training iteration (forward + backward, no
    /// recomputation), as used for MFU.
    pub fn model_flops_per_iteration(&self, global_batch: u64) -> u64 {
        3 * (self.num_layers * self.flops_per_layer_fwd(global_batch)
            + self.flops_logits_fwd(global_batch))
    }

    /// Extra FLOPs spent re-running layer forwards under activation recomputation.
    pub fn recompute_flops_per_iteration(&self, global_batch: u64) -> u64 {
        self.num_layers * self.flops_per_layer_fwd(global_batch)
    }

    /// All FLOPs the devices execute in one iteration under `config`.
    pub fn hardware_flops_per_iteration(&self, config: &ConfigPoint) -> u64 {
        let extra = if config.act_recompute {
            self.recompute_flops_per_iteration(config.global_batch)
        } else {
            0
        };
        self.model_flops_per_iteration(config.global_batch) + extra
    }

    /// Activation bytes a layer keeps per microbatch of `batch` samples
    /// without recomputation, under tensor-parallel degree `tp`.
    pub fn layer_activation_bytes(&self, batch: u64, tp: u64, seq_parallel: bool) -> u64 {
        let (s, h, a) = (self.seq_len, self.hidden_size, self.num_heads);
        let sbh_t = s * batch * (h / tp);
        let attn = 5 * (a / tp) * s * s * batch;
        if seq_parallel {
            34 * sbh_t + attn
        } else {
            10 * s * batch * h + 24 * sbh_t + attn
        }
    }

    /// Bytes of the layer-input checkpoint kept under full recomputation.
    pub fn layer_checkpoint_bytes(&self, batch: u64, tp: u64, seq_parallel: bool) -> u64 {
        let sbh = self.seq_len * batch * self.hidden_size;
        if seq_parallel {
            2 * sbh / tp
        } else {
            2 * sbh
        }
    }

    /// Activation bytes of the output head (fp32 logits and final norm input).
    pub fn head_activation_bytes(&self, batch: u64, tp: u64) -> u64 {
        4 * batch * self.seq_len * (self.vocab_size / tp)
            + 2 * self.seq_len * batch * self.hidden_size
    }

    /// Parameters of one transformer layer held by one tensor-parallel rank.
    pub fn layer_params_local(&self, tp: u64) -> u64 {
        let (h, f) = (self.hidden_size, self.ffn_hidden_size);
        (4 * h * h + 2 * h * f) / tp + (3 * h + f) / tp + 6 * h
    }

    /// Embedding parameters held by one rank of the first pipeline stage.
    pub fn embedding_params_local(&self, tp: u64) -> u64 {
        self.vocab_size * self.hidden_size / tp + self.seq_len * self.hidden_size
    }

    /// Output-head parameters held by one rank of the last pipeline stage.
    pub fn head_params_local(&self, tp: u64) -> u64 {
        self.vocab_size * self.hidden_size / tp + 2 * self.hidden_size
    }
}

/// Pipeline schedule used to order microbatches within an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ScheduleKind {
    GPipe,
    OneFOneB,
    InterleavedOneFOneB,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::GPipe => "gpipe",
            ScheduleKind::OneFOneB => "1f1b",
            ScheduleKind::InterleavedOneFOneB => "interleaved",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gpipe" => Some(ScheduleKind::GPipe),
            "1f1b" => Some(ScheduleKind::OneFOneB),
            "interleaved" => Some(ScheduleKind::InterleavedOneFOneB),
            _ => None,
        }
    }

    /// Schedule to use for `config` when the operator asked for `self`.
    /// 1F1B requests interleave when the point has virtual stages, and an
    /// interleaved request without virtual stages degrades to 1F1B. GPipe
    /// cannot interleave.
    pub fn resolve(self, config: &ConfigPoint) -> Result<ScheduleKind, ConfigError> {
        match self {
            ScheduleKind::GPipe if config.virtual_stages > 1 => {
                Err(ConfigError::ScheduleMismatch {
                    schedule: self,
                    virtual_stages: config.virtual_stages,
                })
            }
            ScheduleKind::GPipe => Ok(self),
            _ if config.virtual_stages > 1 => Ok(ScheduleKind::InterleavedOneFOneB),
            _ => Ok(ScheduleKind::OneFOneB),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One training recipe. The data-parallel degree is derived from the device
/// count; the number of microbatches per iteration is `micro_mult · pp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub tp: u32,
    pub pp: u32,
    pub micro_mult: u32,
    pub virtual_stages: u32,
    pub act_recompute: bool,
    pub seq_parallel: bool,
    pub dist_optimizer: bool,
    pub global_batch: u64,
}

impl ConfigPoint {
    /// Plain data parallelism: every knob at its neutral value.
    pub fn data_parallel(global_batch: u64) -> Self {
        ConfigPoint {
            tp: 1,
            pp: 1,
            micro_mult: 1,
            virtual_stages: 1,
            act_recompute: false,
            seq_parallel: false,
            dist_optimizer: false,
            global_batch,
        }
    }

    pub fn num_microbatches(&self) -> u64 {
        self.micro_mult as u64 * self.pp as u64
    }

    /// Validates the point against a model and device count and returns the
    /// derived degrees.
    pub fn derive(&self, model: &ModelSpec, num_devices: u32) -> Result<Derived, ConfigError> {
        model.validate()?;
        for (name, v) in [
            ("tp", self.tp),
            ("pp", self.pp),
            ("micro_mult", self.micro_mult),
            ("virtual_stages", self.virtual_stages),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroKnob(name));
            }
        }
        if self.global_batch == 0 {
            return Err(ConfigError::ZeroKnob("global_batch"));
        }
        let group = self.tp as u64 * self.pp as u64;
        if num_devices == 0 || !(num_devices as u64).is_multiple_of(group) {
            return Err(ConfigError::DegreesNotDividingDevices {
                tp: self.tp,
                pp: self.pp,
                devices: num_devices,
            });
        }
        let dp = (num_devices as u64 / group) as u32;
        let tp = self.tp as u64;
        for (what, value) in [
            ("hidden_size", model.hidden_size),
            ("num_heads", model.num_heads),
            ("ffn_hidden_size", model.ffn_hidden_size),
            ("vocab_size", model.vocab_size),
        ] {
            if value % tp != 0 {
                return Err(ConfigError::TpNotDividing {
                    what,
                    value,
                    tp: self.tp,
                });
            }
        }
        if self.seq_parallel {
            if self.tp == 1 {
                return Err(ConfigError::SequenceParallelNeedsTp);
            }
            if !model.seq_len.is_multiple_of(tp) {
                return Err(ConfigError::TpNotDividing {
                    what: "seq_len",
                    value: model.seq_len,
                    tp: self.tp,
                });
            }
        }
        if self.virtual_stages > 1 && self.pp == 1 {
            return Err(ConfigError::InterleavingNeedsPipeline {
                virtual_stages: self.virtual_stages,
            });
        }
        let chunks = self.pp as u64 * self.virtual_stages as u64;
        if !model.num_layers.is_multiple_of(chunks) {
            return Err(ConfigError::LayersNotDivisible {
                layers: model.num_layers,
                pp: self.pp,
                virtual_stages: self.virtual_stages,
            });
        }
        let microbatches = self.num_microbatches();
        let per_step = dp as u64 * microbatches;
        if !self.global_batch.is_multiple_of(per_step) {
            return Err(ConfigError::BatchNotDivisible {
                global_batch: self.global_batch,
                dp,
                microbatches,
            });
        }
        Ok(Derived {
            dp,
            microbatches,
            microbatch_size: self.global_batch / per_step,
            layers_per_chunk: model.num_layers / chunks,
        })
    }
}

impl fmt::Display for ConfigPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp={} pp={} mm={} vs={} recompute={} sp={} distopt={} gb={}",
            self.tp,
            self.pp,
            self.micro_mult,
            self.virtual_stages,
            self.act_recompute as u8,
            self.seq_parallel as u8,
            self.dist_optimizer as u8,
            self.global_batch
        )
    }
}

/// Quantities derived from a valid [`ConfigPoint`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Derived {
    pub dp: u32,
    pub microbatches: u64,
    pub microbatch_size: u64,
    pub layers_per_chunk: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("model dimension `{0}` must be at least 1")]
    ZeroDimension(&'static str),
    #[error("num_heads ({heads}) must divide hidden_size ({hidden})")]
    HeadsNotDividingHidden { hidden: u64, heads: u64 },
    #[error("knob `{0}` must be at least 1")]
    ZeroKnob(&'static str),
    #[error("tp*pp = {tp}*{pp} does not divide the {devices} available devices")]
    DegreesNotDividingDevices { tp: u32, pp: u32, devices: u32 },
    #[error("tp = {tp} does not divide {what} = {value}")]
    TpNotDividing {
        what: &'static str,
        value: u64,
        tp: u32,
    },
    #[error("seq_parallel requires tp > 1")]
    SequenceParallelNeedsTp,
    #[error("virtual_stages = {virtual_stages} requires pp > 1")]
    InterleavingNeedsPipeline { virtual_stages: u32 },
    #[error("num_layers = {layers} is not divisible by pp*virtual_stages = {pp}*{virtual_stages}")]
    LayersNotDivisible {
        layers: u64,
        pp: u32,
        virtual_stages: u32,
    },
    #[error(
        "global_batch = {global_batch} is not divisible by dp*microbatches = {dp}*{microbatches}"
    )]
    BatchNotDivisible {
        global_batch: u64,
        dp: u32,
        microbatches: u64,
    },
    #[error("schedule `{schedule}` is incompatible with virtual_stages = {virtual_stages}")]
    ScheduleMismatch {
        schedule: ScheduleKind,
        virtual_stages: u32,
    },
    #[error("{microbatches} microbatches cannot fill a {pp}-stage pipeline")]
    TooFewMicrobatches { microbatches: u64, pp: u32 },
}

impl ConfigError {
    /// Name of the knob or field the error is about, for operator messages.
    pub fn knob(&self) -> &'static str {
        match self {
            ConfigError::ZeroDimension(n) | ConfigError::ZeroKnob(n) => n,
            ConfigError::HeadsNotDividingHidden { .. } => "num_heads",
            ConfigError::DegreesNotDividingDevices { .. } => "tp",
            ConfigError::TpNotDividing { .. } => "tp",
            ConfigError::SequenceParallelNeedsTp => "seq_parallel",
            ConfigError::InterleavingNeedsPipeline { .. } => "virtual_stages",
            ConfigError::LayersNotDivisible { .. } => "pp",
            ConfigError::BatchNotDivisible { .. } => "global_batch",
            ConfigError::ScheduleMismatch { .. } => "virtual_stages",
            ConfigError::TooFewMicrobatches { .. } => "micro_mult",
        }
    }
}
