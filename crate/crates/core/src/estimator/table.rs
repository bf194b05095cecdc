//! Profile tables: observed kernel runtimes keyed by shape and device class.
//!
//! Text form, one row per line after a `dltsim-profile v1` header (blank
//! lines and `#` comments are skipped):
//!
//! ```text
//! <op_kind> dtype=<dt|-> flops=<f> bytes=<b> attrs=<k>:<v>,... <device_class> <duration_ns>
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use thiserror::Error;

use crate::cluster::DeviceClass;
use crate::math::{exp, ln, round_ns};
use crate::trace::{is_valid_token, Attrs, Dtype};
use crate::Nanos;

use super::{roofline_estimate, Estimate, EstimateError, EstimateWarning, Estimator, KernelDesc};

pub const PROFILE_HEADER: &str = "dltsim-profile v1";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ProfileRow {
    pub op_kind: String,
    pub dtype: Option<Dtype>,
    pub flop_count: u64,
    pub bytes_moved: u64,
    pub attrs: Attrs,
    pub device: String,
    pub duration: Nanos,
}

impl ProfileRow {
    pub fn from_desc(desc: &KernelDesc<'_>, device: &str, duration: Nanos) -> Self {
        ProfileRow {
            op_kind: desc.op_kind.into(),
            dtype: desc.dtype,
            flop_count: desc.flop_count,
            bytes_moved: desc.bytes_moved,
            attrs: desc.attrs.clone(),
            device: device.into(),
            duration,
        }
    }

    fn key(&self) -> RowKey {
        (
            self.op_kind.clone(),
            self.dtype,
            self.flop_count,
            self.bytes_moved,
            self.attrs.clone(),
            self.device.clone(),
        )
    }

    fn work(&self) -> u64 {
        if self.flop_count > 0 {
            self.flop_count
        } else {
            self.bytes_moved
        }
    }
}

type RowKey = (String, Option<Dtype>, u64, u64, Attrs, String);
type CurveKey = (String, Option<Dtype>, String);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TableError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate profile row for `{op_kind}` on `{device}`")]
    DuplicateKey { op_kind: String, device: String },
    #[error("profile row for `{op_kind}` has zero duration")]
    ZeroDuration { op_kind: String },
}

/// Rows indexed for exact lookup and per-(op_kind, dtype, device) work curves.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileTable {
    rows: Vec<ProfileRow>,
    exact: BTreeMap<RowKey, Nanos>,
    /// Points sorted by work; rows sharing a work value are merged by
    /// geometric mean of their durations.
    curves: BTreeMap<CurveKey, Vec<(u64, f64)>>,
}

impl ProfileTable {
    pub fn from_rows(mut rows: Vec<ProfileRow>) -> Result<Self, TableError> {
        rows.sort();
        let mut exact = BTreeMap::new();
        let mut grouped: BTreeMap<CurveKey, BTreeMap<u64, (f64, u32)>> = BTreeMap::new();
        for r in &rows {
            if r.duration == 0 {
                return Err(TableError::ZeroDuration {
                    op_kind: r.op_kind.clone(),
                });
            }
            if exact.insert(r.key(), r.duration).is_some() {
                return Err(TableError::DuplicateKey {
                    op_kind: r.op_kind.clone(),
                    device: r.device.clone(),
                });
            }
            let acc = grouped
                .entry((r.op_kind.clone(), r.dtype, r.device.clone()))
                .or_default()
                .entry(r.work())
                .or_insert((0.0, 0));
            acc.0 += ln(r.duration as f64);
            acc.1 += 1;
        }
        let curves = grouped
            .into_iter()
            .map(|(k, pts)| {
                (
                    k,
                    pts.into_iter()
                        .map(|(w, (sum, n))| (w, exp(sum / n as f64)))
                        .collect(),
                )
            })
            .collect();
        Ok(ProfileTable {
            rows,
            exact,
            curves,
        })
    }

    pub fn rows(&self) -> &[ProfileRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Exact row match, else log-log interpolation along work between the
    /// two nearest rows of the same op_kind, dtype and device (extrapolating
    /// from the two end rows outside the profiled range). `None` when the
    /// table has no row for that op_kind.
    pub fn lookup(&self, desc: &KernelDesc<'_>, device: &str) -> Option<Nanos> {
        let key: RowKey = (
            desc.op_kind.into(),
            desc.dtype,
            desc.flop_count,
            desc.bytes_moved,
            desc.attrs.clone(),
            device.into(),
        );
        if let Some(&d) = self.exact.get(&key) {
            return Some(d);
        }
        let pts = self.curves.get(&(key.0, key.1, key.5))?;
        Some(interpolate(pts, desc.work()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(PROFILE_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = write!(
                s,
                "{} dtype={} flops={} bytes={} attrs=",
                r.op_kind,
                r.dtype.map_or("-", Dtype::name),
                r.flop_count,
                r.bytes_moved
            );
            for (i, (k, v)) in r.attrs.iter().enumerate() {
                if i > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{k}:{v}");
            }
            let _ = writeln!(s, " {} {}", r.device, r.duration);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TableError> {
        let mut rows = Vec::new();
        let mut saw_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = i + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !saw_header {
                if line != PROFILE_HEADER {
                    return Err(malformed(
                        lineno,
                        format!("expected header `{PROFILE_HEADER}`"),
                    ));
                }
                saw_header = true;
                continue;
            }
            rows.push(parse_row(line).map_err(|m| malformed(lineno, m))?);
        }
        if !saw_header {
            return Err(malformed(1, format!("missing header `{PROFILE_HEADER}`")));
        }
        Self::from_rows(rows)
    }
}

fn malformed(line: usize, message: String) -> TableError {
    TableError::Malformed { line, message }
}

fn parse_row(line: &str) -> Result<ProfileRow, String> {
    let fields: Vec<&str> = line.split_ascii_whitespace().collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    let value = |i: usize, key: &str| -> Result<&str, String> {
        fields[i]
            .strip_prefix(key)
            .and_then(|r| r.strip_prefix('='))
            .ok_or_else(|| format!("expected `{key}=` in field {}", i + 1))
    };
    let num = |s: &str, what: &str| s.parse::<u64>().map_err(|_| format!("bad {what} `{s}`"));
    let op_kind = fields[0];
    if !is_valid_token(op_kind) {
        return Err(format!("bad op_kind `{op_kind}`"));
    }
    let dtype = match value(1, "dtype")? {
        "-" => None,
        d => Some(Dtype::from_name(d).ok_or_else(|| format!("unknown dtype `{d}`"))?),
    };
    let flop_count = num(value(2, "flops")?, "flops")?;
    let bytes_moved = num(value(3, "bytes")?, "bytes")?;
    let mut attrs = Attrs::new();
    let raw_attrs = value(4, "attrs")?;
    if !raw_attrs.is_empty() {
        for kv in raw_attrs.split(',') {
            let (k, v) = kv
                .split_once(':')
                .ok_or_else(|| format!("bad attr `{kv}`"))?;
            if !is_valid_token(k) {
                return Err(format!("bad attr key `{k}`"));
            }
            attrs.insert(k.to_string(), num(v, "attr value")?);
        }
    }
    Ok(ProfileRow {
        op_kind: op_kind.into(),
        dtype,
        flop_count,
        bytes_moved,
        attrs,
        device: fields[5].into(),
        duration: num(fields[6], "duration")?,
    })
}

fn interpolate(pts: &[(u64, f64)], work: u64) -> Nanos {
    let positive: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(w, _)| *w > 0)
        .map(|&(w, d)| (ln(w as f64), ln(d)))
        .collect();
    if work == 0 || positive.len() < 2 {
        // Nothing to interpolate along: use the nearest point.
        let &(_, d) = pts
            .iter()
            .min_by_key(|(w, _)| w.abs_diff(work))
            .expect("curves are never empty");
        return round_ns(d).max(1);
    }
    let x = ln(work as f64);
    let i = match positive.iter().position(|&(px, _)| px >= x) {
        Some(0) => 0,
        Some(i) => i - 1,
        None => positive.len() - 2,
    };
    let (x0, y0) = positive[i];
    let (x1, y1) = positive[i + 1];
    let y = y0 + (x - x0) / (x1 - x0) * (y1 - y0);
    round_ns(exp(y)).max(1)
}

/// Profile-table lookups with a roofline fallback for unseen op_kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct TableEstimator {
    pub table: ProfileTable,
}

impl TableEstimator {
    pub fn new(table: ProfileTable) -> Self {
        TableEstimator { table }
    }
}

impl Estimator for TableEstimator {
    fn estimate_kernel(
        &self,
        kernel: &KernelDesc<'_>,
        device: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        Ok(match self.table.lookup(kernel, &device.name) {
            Some(d) => Estimate::exact(d),
            None => {
                let mut e = roofline_estimate(kernel, device);
                e.warning = Some(EstimateWarning::TableMiss(kernel.op_kind.into()));
                e
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn row(op: &str, flops: u64, dur: Nanos) -> ProfileRow {
        ProfileRow {
            op_kind: op.into(),
            dtype: Some(Dtype::Bf16),
            flop_count: flops,
            bytes_moved: 64,
            attrs: Attrs::new(),
            device: "fast".into(),
            duration: dur,
        }
    }

    fn desc(op: &str, flops: u64) -> (String, u64) {
        (op.into(), flops)
    }

    fn query(t: &ProfileTable, op: &str, flops: u64) -> Option<Nanos> {
        let (op, flops) = desc(op, flops);
        let attrs = Attrs::new();
        let d = KernelDesc {
            op_kind: &op,
            dtype: Some(Dtype::Bf16),
            flop_count: flops,
            bytes_moved: 64,
            attrs: &attrs,
        };
        t.lookup(&d, "fast")
    }

    #[test]
    fn exact_and_geometric_midpoint() {
        let t = ProfileTable::from_rows(vec![
            row("gemm.fwd", 1_000_000, 10_000),
            row("gemm.fwd", 100_000_000, 40_000),
        ])
        .unwrap();
        assert_eq!(query(&t, "gemm.fwd", 1_000_000), Some(10_000));
        assert_eq!(query(&t, "gemm.fwd", 10_000_000), Some(20_000));
        assert_eq!(query(&t, "softmax.fwd", 10), None);
    }

    #[test]
    fn unknown_op_uses_roofline() {
        let t = ProfileTable::from_rows(vec![row("gemm.fwd", 1_000, 10)]).unwrap();
        let est = TableEstimator::new(t);
        let attrs = Attrs::new();
        let d = KernelDesc {
            op_kind: "softmax.fwd",
            dtype: Some(Dtype::Bf16),
            flop_count: 0,
            bytes_moved: 1 << 20,
            attrs: &attrs,
        };
        let dev = DeviceClass::fast();
        let e = est.estimate_kernel(&d, &dev).unwrap();
        assert_eq!(e.duration, roofline_estimate(&d, &dev).duration);
        assert_eq!(
            e.warning,
            Some(EstimateWarning::TableMiss("softmax.fwd".into()))
        );
    }

    #[test]
    fn text_round_trip_and_duplicates() {
        let mut r = row("gemm.fwd", 8, 3);
        r.attrs.insert("m".into(), 2);
        r.attrs.insert("n".into(), 4);
        let mut copy = row("memcpy.h2d", 0, 9);
        copy.dtype = None;
        let t = ProfileTable::from_rows(vec![r.clone(), copy]).unwrap();
        let text = t.to_text();
        assert!(text.contains("gemm.fwd dtype=bf16 flops=8 bytes=64 attrs=m:2,n:4 fast 3"));
        assert_eq!(ProfileTable::from_text(&text).unwrap(), t);
        assert!(matches!(
            ProfileTable::from_rows(vec![r.clone(), r]),
            Err(TableError::DuplicateKey { .. })
        ));
        assert!(matches!(
            ProfileTable::from_text("nope"),
            Err(TableError::Malformed { line: 1, .. })
        ));
    }
}
