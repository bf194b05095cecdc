//! TOML inputs and built-in presets.
//!
//! Every `--model`, `--cluster` and `--search-spec` argument is either the
//! name of a built-in preset or a path to a TOML file. A manifest bundles
//! all inputs of a run in one file.

use std::fs;
use std::path::{Path, PathBuf};

use dltsim_core::cluster::{ClusterSpec, DeviceClass};
use dltsim_core::frontend::{FrontendOptions, DEFAULT_DISPATCH_GAP_NS};
use dltsim_core::model::{ConfigPoint, ModelSpec, ScheduleKind};
use dltsim_core::search::{EarlyStop, SearchOptions, SearchSpace, StopRule, Strategy};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const GIB: f64 = (1u64 << 30) as f64;

pub const MODEL_PRESETS: &[(&str, &str)] = &[
    ("tiny", include_str!("../presets/models/tiny.toml")),
    ("small", include_str!("../presets/models/small.toml")),
    (
        "gpt3-2.7b",
        include_str!("../presets/models/gpt3-2.7b.toml"),
    ),
    (
        "gpt3-18.4b",
        include_str!("../presets/models/gpt3-18.4b.toml"),
    ),
];

pub const CLUSTER_PRESETS: &[(&str, &str)] = &[
    ("fast-8", include_str!("../presets/clusters/fast-8.toml")),
    ("fast-16", include_str!("../presets/clusters/fast-16.toml")),
    ("slow-16", include_str!("../presets/clusters/slow-16.toml")),
    (
        "tight-16",
        include_str!("../presets/clusters/tight-16.toml"),
    ),
    (
        "scaleout-64",
        include_str!("../presets/clusters/scaleout-64.toml"),
    ),
];

pub const SEARCH_PRESETS: &[(&str, &str)] = &[
    ("small", include_str!("../presets/search/small.toml")),
    ("standard", include_str!("../presets/search/standard.toml")),
];

fn parse<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        message: e.to_string(),
    })
}

/// Resolves `arg` as a preset name first, then as a file path (relative to `base`).
fn load<T: DeserializeOwned>(arg: &str, presets: &[(&str, &str)], base: &Path) -> Result<T> {
    if let Some((name, text)) = presets.iter().find(|(n, _)| *n == arg) {
        return parse(text, Path::new(&format!("<preset {name}>")));
    }
    let path = base.join(arg);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound && !arg.contains(['/', '.']) {
            let names: Vec<&str> = presets.iter().map(|p| p.0).collect();
            Error::Usage(format!(
                "unknown preset `{arg}` (available: {})",
                names.join(", ")
            ))
        } else {
            Error::io(&path, e)
        }
    })?;
    parse(&text, &path)
}

pub fn load_model(arg: &str) -> Result<ModelSpec> {
    load_model_in(arg, Path::new("."))
}

fn load_model_in(arg: &str, base: &Path) -> Result<ModelSpec> {
    load(arg, MODEL_PRESETS, base)
}

pub fn device_preset(name: &str) -> Option<DeviceClass> {
    match name {
        "fast" => Some(DeviceClass::fast()),
        "slow" => Some(DeviceClass::slow()),
        _ => None,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeviceRef {
    Preset(String),
    Custom(DeviceClass),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterFile {
    pub num_hosts: u32,
    pub devices_per_host: u32,
    #[serde(default)]
    pub memory_gib: Option<f64>,
    #[serde(default)]
    pub memory_capacity: Option<u64>,
    pub device: DeviceRef,
}

impl ClusterFile {
    pub fn resolve(&self) -> Result<ClusterSpec> {
        let device = match &self.device {
            DeviceRef::Preset(n) => device_preset(n).ok_or_else(|| {
                Error::Usage(format!(
                    "unknown device preset `{n}` (available: fast, slow)"
                ))
            })?,
            DeviceRef::Custom(d) => d.clone(),
        };
        let capacity = match (self.memory_capacity, self.memory_gib) {
            (Some(b), None) => b,
            (None, Some(g)) => (g * GIB).round() as u64,
            _ => {
                return Err(Error::Usage(
                    "cluster needs exactly one of memory_capacity or memory_gib".into(),
                ))
            }
        };
        let spec = ClusterSpec::new(self.num_hosts, self.devices_per_host, capacity, device);
        spec.validate().map_err(|e| Error::Config {
            knob: "cluster",
            source: e.into(),
        })?;
        Ok(spec)
    }
}

pub fn load_cluster(arg: &str) -> Result<ClusterSpec> {
    load_cluster_in(arg, Path::new("."))
}

fn load_cluster_in(arg: &str, base: &Path) -> Result<ClusterSpec> {
    load::<ClusterFile>(arg, CLUSTER_PRESETS, base)?.resolve()
}

fn one() -> u32 {
    1
}

/// A configuration point; unset knobs take their neutral values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "one")]
    pub tp: u32,
    #[serde(default = "one")]
    pub pp: u32,
    #[serde(default = "one")]
    pub micro_mult: u32,
    #[serde(default = "one")]
    pub virtual_stages: u32,
    #[serde(default)]
    pub act_recompute: bool,
    #[serde(default)]
    pub seq_parallel: bool,
    #[serde(default)]
    pub dist_optimizer: bool,
    pub global_batch: u64,
}

impl From<ConfigFile> for ConfigPoint {
    fn from(c: ConfigFile) -> Self {
        ConfigPoint {
            tp: c.tp,
            pp: c.pp,
            micro_mult: c.micro_mult,
            virtual_stages: c.virtual_stages,
            act_recompute: c.act_recompute,
            seq_parallel: c.seq_parallel,
            dist_optimizer: c.dist_optimizer,
            global_batch: c.global_batch,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendFile {
    pub schedule: Option<String>,
    pub dispatch_gap_ns: Option<u64>,
    pub gap_jitter_ns: Option<u64>,
    pub seed: Option<u64>,
}

pub fn parse_schedule(s: &str) -> Result<ScheduleKind> {
    ScheduleKind::from_name(s).ok_or_else(|| {
        Error::Usage(format!(
            "unknown schedule `{s}` (expected gpipe, 1f1b or interleaved)"
        ))
    })
}

impl FrontendFile {
    pub fn resolve(&self) -> Result<FrontendOptions> {
        Ok(FrontendOptions {
            schedule: self
                .schedule
                .as_deref()
                .map(parse_schedule)
                .transpose()?
                .unwrap_or(ScheduleKind::OneFOneB),
            dispatch_gap_ns: self.dispatch_gap_ns.unwrap_or(DEFAULT_DISPATCH_GAP_NS),
            gap_jitter_ns: self.gap_jitter_ns.unwrap_or(0),
            seed: self.seed.unwrap_or(0),
        })
    }
}

/// A config file: the point itself plus optional frontend settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConfigDoc {
    #[serde(flatten)]
    config: ConfigFile,
    #[serde(default)]
    frontend: Option<FrontendFile>,
}

/// All inputs of a run, bundled in one file. `model` and `cluster` are
/// preset names or paths relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    model: Option<String>,
    cluster: Option<String>,
    config: Option<ConfigFile>,
    #[serde(default)]
    frontend: Option<FrontendFile>,
    search: Option<String>,
}

/// Resolved run inputs. Each part is optional until a command needs it.
#[derive(Debug, Clone, Default)]
pub struct Inputs {
    pub model: Option<ModelSpec>,
    pub cluster: Option<ClusterSpec>,
    pub config: Option<ConfigPoint>,
    pub frontend: FrontendFile,
    pub search: Option<SearchSpec>,
}

impl Inputs {
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ManifestFile = parse(&text, path)?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Inputs {
            model: m
                .model
                .as_deref()
                .map(|a| load_model_in(a, &base))
                .transpose()?,
            cluster: m
                .cluster
                .as_deref()
                .map(|a| load_cluster_in(a, &base))
                .transpose()?,
            config: m.config.map(Into::into),
            frontend: m.frontend.unwrap_or_default(),
            search: m
                .search
                .as_deref()
                .map(|a| load_search_in(a, &base))
                .transpose()?,
        })
    }

    pub fn set_config_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ConfigDoc = parse(&text, path)?;
        self.config = Some(doc.config.into());
        if let Some(f) = doc.frontend {
            self.frontend = f;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<&ModelSpec> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::Usage("no model given (use --model or a manifest)".into()))
    }

    pub fn cluster(&self) -> Result<&ClusterSpec> {
        self.cluster
            .as_ref()
            .ok_or_else(|| Error::Usage("no cluster given (use --cluster or a manifest)".into()))
    }

    pub fn config(&self) -> Result<ConfigPoint> {
        self.config.ok_or_else(|| {
            Error::Usage("no configuration given (use --config or a manifest)".into())
        })
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceFile {
    tp: Option<Vec<u32>>,
    pp: Option<Vec<u32>>,
    virtual_stages: Option<Vec<u32>>,
    micro_mult: Option<Vec<u32>>,
    act_recompute: Option<Vec<bool>>,
    seq_parallel: Option<Vec<bool>>,
    dist_optimizer: Option<Vec<bool>>,
    global_batch: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchFile {
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    mu: Option<usize>,
    #[serde(default)]
    lambda: Option<usize>,
    #[serde(default)]
    tactics: Option<bool>,
    #[serde(default)]
    max_trials: Option<usize>,
    #[serde(default)]
    early_stop: Option<EarlyStop>,
    space: SpaceFile,
}

/// A search space together with how to explore it.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpec {
    pub space: SearchSpace,
    pub strategy: String,
    pub seed: u64,
    pub mu: usize,
    pub lambda: usize,
    pub tactics: bool,
    pub stop: StopRule,
}

impl SearchSpec {
    pub fn options(&self) -> Result<SearchOptions> {
        let strategy = match self.strategy.as_str() {
            "grid" => Strategy::Grid,
            "random" => Strategy::Random { seed: self.seed },
            "evolutionary" => Strategy::Evolutionary {
                seed: self.seed,
                mu: self.mu,
                lambda: self.lambda,
            },
            s => {
                return Err(Error::Usage(format!(
                    "unknown strategy `{s}` (expected grid, random or evolutionary)"
                )))
            }
        };
        Ok(SearchOptions {
            strategy,
            tactics: self.tactics,
            stop: self.stop,
        })
    }
}

impl From<SearchFile> for SearchSpec {
    fn from(f: SearchFile) -> Self {
        let std = SearchSpace::standard(f.space.global_batch);
        let s = f.space;
        SearchSpec {
            space: SearchSpace {
                tp: s.tp.unwrap_or(std.tp),
                pp: s.pp.unwrap_or(std.pp),
                virtual_stages: s.virtual_stages.unwrap_or(std.virtual_stages),
                micro_mult: s.micro_mult.unwrap_or(std.micro_mult),
                act_recompute: s.act_recompute.unwrap_or(std.act_recompute),
                seq_parallel: s.seq_parallel.unwrap_or(std.seq_parallel),
                dist_optimizer: s.dist_optimizer.unwrap_or(std.dist_optimizer),
                global_batch: s.global_batch,
            },
            strategy: f.strategy.unwrap_or_else(|| "grid".into()),
            seed: f.seed.unwrap_or(0),
            mu: f.mu.unwrap_or(4),
            lambda: f.lambda.unwrap_or(8),
            tactics: f.tactics.unwrap_or(true),
            stop: StopRule {
                max_trials: f.max_trials,
                early_stop: f.early_stop,
            },
        }
    }
}

pub fn load_search(arg: &str) -> Result<SearchSpec> {
    load_search_in(arg, Path::new("."))
}

fn load_search_in(arg: &str, base: &Path) -> Result<SearchSpec> {
    Ok(load::<SearchFile>(arg, SEARCH_PRESETS, base)?.into())
}
