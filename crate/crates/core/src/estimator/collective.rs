use crate::cluster::{DeviceClass, TopologyClass};
use crate::math::round_ns;
use crate::trace::CollectiveKind;
use crate::Nanos;

/// Ring alpha-beta wire time of one collective.
///
/// With `n` ranks, per-step latency `α` and link bandwidth `β` (picked by
/// topology; mixed groups use the inter-host link):
///
/// * AllGather, ReduceScatter: `α(n−1) + ((n−1)/n)·S/β`
/// * AllReduce: a ReduceScatter followed by an AllGather,
///   `α·2(n−1) + (2(n−1)/n)·S/β`
/// * Broadcast, SendRecv: `α + S/β`
///
/// A single-rank group costs nothing. AllReduce is computed as twice the
/// rounded one-phase time, so it always equals the sum of the two phases it
/// decomposes into and stays within a nanosecond of the unrounded formula.
pub fn collective_estimate(
    kind: CollectiveKind,
    bytes: u64,
    nranks: u32,
    topology: TopologyClass,
    device: &DeviceClass,
) -> Nanos {
    if nranks <= 1 {
        return 0;
    }
    let link = device.link(topology);
    let n = nranks as f64;
    let wire_ns = bytes as f64 / link.bandwidth * 1e9;
    let phase = || round_ns(link.alpha_ns * (n - 1.0) + (n - 1.0) / n * wire_ns);
    match kind {
        CollectiveKind::AllGather | CollectiveKind::ReduceScatter => phase(),
        CollectiveKind::AllReduce => 2 * phase(),
        CollectiveKind::Broadcast | CollectiveKind::SendRecv => round_ns(link.alpha_ns + wire_ns),
    }
}
