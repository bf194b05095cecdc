//! Trace directories, expansion maps, job manifests and profile tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dltsim_core::collator::JobTrace;
use dltsim_core::estimator::ProfileTable;
use dltsim_core::format::{decode_trace, encode_trace, TraceError};
use dltsim_core::trace::{validate_trace, WorkerTrace};
use dltsim_core::Rank;

use crate::{Error, Result};

pub const EXPANSION_FILE: &str = "expansion.txt";
pub const EXPANSION_HEADER: &str = "dltsim-expansion v1";
pub const JOB_FILE: &str = "job.manifest";
pub const JOB_HEADER: &str = "dltsim-job v1";

pub fn trace_file_name(rank: Rank) -> String {
    format!("rank_{rank}.trace")
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Reads and validates one trace file.
pub fn read_trace(path: &Path) -> Result<WorkerTrace> {
    let text = read_file(path)?;
    let trace = decode_trace(&text).map_err(|source| Error::Trace {
        path: path.into(),
        source,
    })?;
    if let Some(v) = validate_trace(&trace).into_iter().next() {
        return Err(Error::Trace {
            path: path.into(),
            source: TraceError::Invalid(v),
        });
    }
    Ok(trace)
}

/// Writes `rank_<r>.trace` for every trace and the expansion map into `dir`.
/// Returns the trace paths in rank order.
pub fn write_trace_dir(
    dir: &Path,
    traces: &[WorkerTrace],
    duplicates: &BTreeMap<Rank, Rank>,
) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(traces.len());
    for t in traces {
        let p = dir.join(trace_file_name(t.global_rank));
        write_file(&p, encode_trace(t))?;
        paths.push(p);
    }
    write_file(&dir.join(EXPANSION_FILE), encode_expansion(duplicates))?;
    Ok(paths)
}

/// Reads every `rank_<r>.trace` of `dir` (rank order) and the expansion map,
/// which may be absent.
pub fn read_trace_dir(dir: &Path) -> Result<(Vec<WorkerTrace>, BTreeMap<Rank, Rank>)> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name();
        let Some(rank) = name
            .to_str()
            .and_then(|n| n.strip_prefix("rank_"))
            .and_then(|n| n.strip_suffix(".trace"))
            .and_then(|n| n.parse::<Rank>().ok())
        else {
            continue;
        };
        files.push((rank, e.path()));
    }
    if files.is_empty() {
        return Err(Error::Usage(format!(
            "{}: no rank_<r>.trace files",
            dir.display()
        )));
    }
    files.sort();
    let traces = files
        .iter()
        .map(|(_, p)| read_trace(p))
        .collect::<Result<Vec<_>>>()?;
    let exp = dir.join(EXPANSION_FILE);
    let duplicates = if exp.exists() {
        decode_expansion(&read_file(&exp)?, &exp)?
    } else {
        BTreeMap::new()
    };
    Ok((traces, duplicates))
}

pub fn encode_expansion(duplicates: &BTreeMap<Rank, Rank>) -> String {
    let mut s = format!("{EXPANSION_HEADER}\n");
    for (r, rep) in duplicates {
        let _ = writeln!(s, "dup rank={r} rep={rep}");
    }
    s
}

pub fn decode_expansion(text: &str, path: &Path) -> Result<BTreeMap<Rank, Rank>> {
    let bad = |line: usize, message: String| Error::Parse {
        path: path.into(),
        message: format!("line {line}: {message}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == EXPANSION_HEADER => {}
        _ => return Err(bad(1, format!("expected `{EXPANSION_HEADER}`"))),
    }
    let mut map = BTreeMap::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_ascii_whitespace();
        let (Some("dup"), Some(r), Some(rep), None) = (it.next(), it.next(), it.next(), it.next())
        else {
            return Err(bad(
                i + 1,
                format!("expected `dup rank=<r> rep=<r>`, found `{line}`"),
            ));
        };
        let num = |tok: &str, key: &str| {
            tok.strip_prefix(key)
                .and_then(|v| v.parse::<Rank>().ok())
                .ok_or_else(|| bad(i + 1, format!("bad field `{tok}`")))
        };
        map.insert(num(r, "rank=")?, num(rep, "rep=")?);
    }
    Ok(map)
}

/// The job-level summary written by `collate`: trace files, duplication map
/// and every resolved collective group.
pub fn encode_job_manifest(job: &JobTrace) -> String {
    let mut s = format!(
        "{JOB_HEADER} ranks={} groups={}\n",
        job.num_ranks(),
        job.collectives.len()
    );
    for t in &job.traces {
        let _ = writeln!(
            s,
            "trace rank={} file={}",
            t.global_rank,
            trace_file_name(t.global_rank)
        );
    }
    for (r, rep) in &job.duplicates {
        let _ = writeln!(s, "dup rank={r} rep={rep}");
    }
    for g in &job.collectives {
        let ranks: Vec<String> = g.ranks.iter().map(|r| r.to_string()).collect();
        let _ = writeln!(
            s,
            "group comm={} idx={} kind={} bytes={} nranks={} topo={} ranks={}",
            g.comm,
            g.call_idx,
            g.kind,
            g.bytes,
            g.nranks,
            g.topology,
            ranks.join(",")
        );
    }
    s
}

pub fn read_profile_table(path: &Path) -> Result<ProfileTable> {
    let text = read_file(path)?;
    ProfileTable::from_text(&text).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_round_trips() {
        let map: BTreeMap<Rank, Rank> = [(1, 0), (2, 0), (5, 4)].into();
        let text = encode_expansion(&map);
        assert_eq!(decode_expansion(&text, Path::new("x")).unwrap(), map);
        assert!(decode_expansion("dup rank=1 rep=0\n", Path::new("x")).is_err());
        assert!(decode_expansion(
            &format!("{EXPANSION_HEADER}\ndup rank=a rep=0\n"),
            Path::new("x")
        )
        .is_err());
    }

    #[test]
    fn trace_dir_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = WorkerTrace::new(3, 0, 3);
        t.push(dltsim_core::trace::EventKind::HostGap { duration: 7 });
        let dup: BTreeMap<Rank, Rank> = [(4, 3)].into();
        write_trace_dir(dir.path(), std::slice::from_ref(&t), &dup).unwrap();
        let (traces, d) = read_trace_dir(dir.path()).unwrap();
        assert_eq!(traces, vec![t]);
        assert_eq!(d, dup);
    }
}
