//! Cluster and device descriptions.
//!
//! Units: FLOP/s for compute peaks, bytes per second for bandwidths,
//! nanoseconds for latencies and overheads, bytes for memory capacity.

use alloc::collections::BTreeSet;
use alloc::string::String;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Dtype;
use crate::Rank;

/// Peak dense throughput per element type, in FLOP/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFlops {
    pub f32: f64,
    pub f16: f64,
    pub bf16: f64,
    pub fp8: f64,
}

impl PeakFlops {
    pub fn get(&self, dtype: Dtype) -> f64 {
        match dtype {
            Dtype::F32 => self.f32,
            Dtype::F16 => self.f16,
            Dtype::Bf16 => self.bf16,
            Dtype::Fp8 => self.fp8,
        }
    }
}

/// Latency/bandwidth pair for one class of link (alpha-beta model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkClass {
    /// Per-step latency in nanoseconds.
    pub alpha_ns: f64,
    /// Bandwidth in bytes per second.
    pub bandwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceClass {
    pub name: String,
    pub peak_flops: PeakFlops,
    /// Device memory bandwidth, bytes/s.
    pub hbm_bandwidth: f64,
    /// Host-device copy bandwidth, bytes/s.
    pub host_link_bandwidth: f64,
    /// Fixed per-kernel launch-to-completion overhead, ns.
    pub kernel_overhead_ns: u64,
    pub intra_host: LinkClass,
    pub inter_host: LinkClass,
}

impl DeviceClass {
    /// Generic fast accelerator: roughly an NVLink-connected H100 node with
    /// 400 Gb/s per-device scale-out links.
    pub fn fast() -> Self {
        DeviceClass {
            name: "fast".into(),
            peak_flops: PeakFlops {
                f32: 67e12,
                f16: 989e12,
                bf16: 989e12,
                fp8: 1979e12,
            },
            hbm_bandwidth: 3.35e12,
            host_link_bandwidth: 55e9,
            kernel_overhead_ns: 2_000,
            intra_host: LinkClass {
                alpha_ns: 3_000.0,
                bandwidth: 450e9,
            },
            inter_host: LinkClass {
                alpha_ns: 10_000.0,
                bandwidth: 50e9,
            },
        }
    }

    /// Generic slow accelerator: roughly a V100 node with 100 Gb/s scale-out.
    pub fn slow() -> Self {
        DeviceClass {
            name: "slow".into(),
            peak_flops: PeakFlops {
                f32: 15.7e12,
                f16: 125e12,
                bf16: 125e12,
                fp8: 125e12,
            },
            hbm_bandwidth: 900e9,
            host_link_bandwidth: 12e9,
            kernel_overhead_ns: 4_000,
            intra_host: LinkClass {
                alpha_ns: 5_000.0,
                bandwidth: 150e9,
            },
            inter_host: LinkClass {
                alpha_ns: 20_000.0,
                bandwidth: 12.5e9,
            },
        }
    }

    pub fn link(&self, topo: TopologyClass) -> LinkClass {
        match topo {
            TopologyClass::IntraHost => self.intra_host,
            TopologyClass::InterHost | TopologyClass::Mixed => self.inter_host,
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let positive = [
            ("peak_flops.f32", self.peak_flops.f32),
            ("peak_flops.f16", self.peak_flops.f16),
            ("peak_flops.bf16", self.peak_flops.bf16),
            ("peak_flops.fp8", self.peak_flops.fp8),
            ("hbm_bandwidth", self.hbm_bandwidth),
            ("host_link_bandwidth", self.host_link_bandwidth),
            ("intra_host.bandwidth", self.intra_host.bandwidth),
            ("inter_host.bandwidth", self.inter_host.bandwidth),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ClusterError::NonPositive(name));
            }
        }
        for (name, v) in [
            ("intra_host.alpha_ns", self.intra_host.alpha_ns),
            ("inter_host.alpha_ns", self.inter_host.alpha_ns),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ClusterError::NonPositive(name));
            }
        }
        Ok(())
    }
}

/// Placement class of a communicator's members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyClass {
    /// Every member on one host.
    IntraHost,
    /// Every member on a distinct host.
    InterHost,
    /// Some members share hosts, others do not.
    Mixed,
}

impl TopologyClass {
    pub fn name(self) -> &'static str {
        match self {
            TopologyClass::IntraHost => "intra_host",
            TopologyClass::InterHost => "inter_host",
            TopologyClass::Mixed => "mixed",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "intra_host" => Some(TopologyClass::IntraHost),
            "inter_host" => Some(TopologyClass::InterHost),
            "mixed" => Some(TopologyClass::Mixed),
            _ => None,
        }
    }
}

impl fmt::Display for TopologyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("cluster field `{0}` must be positive")]
    NonPositive(&'static str),
    #[error("rank {rank} is outside a cluster of {devices} devices")]
    RankOutOfRange { rank: Rank, devices: u32 },
}

/// Homogeneous cluster: `num_hosts` hosts with `devices_per_host` identical
/// devices each. Ranks are placed host-major: rank `r` lives on host
/// `r / devices_per_host`, device `r % devices_per_host`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub num_hosts: u32,
    pub devices_per_host: u32,
    /// Device memory capacity in bytes.
    pub memory_capacity: u64,
    pub device: DeviceClass,
}

impl ClusterSpec {
    pub fn new(
        num_hosts: u32,
        devices_per_host: u32,
        memory_capacity: u64,
        device: DeviceClass,
    ) -> Self {
        ClusterSpec {
            num_hosts,
            devices_per_host,
            memory_capacity,
            device,
        }
    }

    pub fn num_devices(&self) -> u32 {
        self.num_hosts * self.devices_per_host
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.num_hosts == 0 {
            return Err(ClusterError::NonPositive("num_hosts"));
        }
        if self.devices_per_host == 0 {
            return Err(ClusterError::NonPositive("devices_per_host"));
        }
        if self.memory_capacity == 0 {
            return Err(ClusterError::NonPositive("memory_capacity"));
        }
        self.device.validate()
    }

    /// `(host, device)` slot of a rank.
    pub fn placement(&self, rank: Rank) -> Result<(u32, u32), ClusterError> {
        if rank >= self.num_devices() {
            return Err(ClusterError::RankOutOfRange {
                rank,
                devices: self.num_devices(),
            });
        }
        Ok((rank / self.devices_per_host, rank % self.devices_per_host))
    }

    pub fn host_of(&self, rank: Rank) -> u32 {
        rank / self.devices_per_host
    }

    pub fn topology_class<I: IntoIterator<Item = Rank>>(&self, ranks: I) -> TopologyClass {
        let mut hosts = BTreeSet::new();
        let mut n = 0usize;
        for r in ranks {
            hosts.insert(self.host_of(r));
            n += 1;
        }
        if hosts.len() <= 1 {
            TopologyClass::IntraHost
        } else if hosts.len() == n {
            TopologyClass::InterHost
        } else {
            TopologyClass::Mixed
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_is_host_major_bijection() {
        let c = ClusterSpec::new(3, 4, 1 << 30, DeviceClass::fast());
        let mut seen = BTreeSet::new();
        for r in 0..c.num_devices() {
            let slot = c.placement(r).unwrap();
            assert!(slot.0 < 3 && slot.1 < 4);
            assert!(seen.insert(slot));
        }
        assert_eq!(c.placement(5).unwrap(), (1, 1));
        assert!(c.placement(12).is_err());
    }

    #[test]
    fn topology_classes() {
        let c = ClusterSpec::new(4, 2, 1 << 30, DeviceClass::slow());
        assert_eq!(c.topology_class([0, 1]), TopologyClass::IntraHost);
        assert_eq!(c.topology_class([0, 2, 4]), TopologyClass::InterHost);
        assert_eq!(c.topology_class([0, 1, 2]), TopologyClass::Mixed);
        assert_eq!(c.topology_class([3]), TopologyClass::IntraHost);
    }

    #[test]
    fn presets_validate() {
        assert!(DeviceClass::fast().validate().is_ok());
        assert!(DeviceClass::slow().validate().is_ok());
        let mut bad = DeviceClass::fast();
        bad.hbm_bandwidth = 0.0;
        assert_eq!(
            bad.validate(),
            Err(ClusterError::NonPositive("hbm_bandwidth"))
        );
        let c = ClusterSpec::new(0, 8, 1, DeviceClass::fast());
        assert!(c.validate().is_err());
    }
}
