use crate::cluster::DeviceClass;
use crate::math::round_ns;

use super::{Estimate, EstimateError, EstimateWarning, Estimator, KernelDesc};

/// Fraction of peak FLOP/s assumed for families the roofline does not know.
pub const UNKNOWN_EFFICIENCY: f64 = 0.5;

/// Default efficiency per kernel family: 0.6 for dense matrix products, 0.8
/// for memory-bound families.
pub const DEFAULT_EFFICIENCY: &[(&str, f64)] = &[
    ("gemm", 0.6),
    ("bmm", 0.6),
    ("softmax", 0.8),
    ("layernorm", 0.8),
    ("gelu", 0.8),
    ("residual", 0.8),
    ("elementwise", 0.8),
    ("dropout", 0.8),
    ("embedding", 0.8),
    ("cross_entropy", 0.8),
    ("optimizer", 0.8),
    ("memcpy", 0.8),
    ("memset", 0.8),
];

/// `max(flops / (peak · efficiency), bytes / bandwidth) + overhead`.
///
/// `peak` is the device's peak for the kernel's dtype (bf16 for copies),
/// `bandwidth` is HBM bandwidth, except host-device copies which use the
/// host link. Unknown families use [`UNKNOWN_EFFICIENCY`] and carry a
/// warning.
pub fn roofline_estimate(kernel: &KernelDesc<'_>, device: &DeviceClass) -> Estimate {
    let family = kernel.family();
    let (eff, warning) = match DEFAULT_EFFICIENCY.iter().find(|(f, _)| *f == family) {
        Some(&(_, e)) => (e, None),
        None => (
            UNKNOWN_EFFICIENCY,
            Some(EstimateWarning::UnknownFamily(kernel.op_kind.into())),
        ),
    };
    let peak = device
        .peak_flops
        .get(kernel.dtype.unwrap_or(crate::trace::Dtype::Bf16));
    let bandwidth = match kernel.op_kind {
        "memcpy.h2d" | "memcpy.d2h" => device.host_link_bandwidth,
        _ => device.hbm_bandwidth,
    };
    let compute_s = kernel.flop_count as f64 / (peak * eff);
    let memory_s = kernel.bytes_moved as f64 / bandwidth;
    let duration =
        round_ns(compute_s.max(memory_s) * 1e9).saturating_add(device.kernel_overhead_ns);
    Estimate { duration, warning }
}

/// The roofline as an [`Estimator`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Roofline;

impl Estimator for Roofline {
    fn estimate_kernel(
        &self,
        kernel: &KernelDesc<'_>,
        device: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        Ok(roofline_estimate(kernel, device))
    }
}
