use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{QAPair, TraceError, TraceRecord};

/// Whether a loader gives up on the first bad line or keeps the valid subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    #[default]
    Strict,
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineIssue {
    /// 1-based line number in the source file.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct LoadOutcome<T> {
    pub records: Vec<T>,
    /// Lines skipped in lenient mode. Always empty in strict mode.
    pub issues: Vec<LineIssue>,
}

fn read_file(path: &Path) -> Result<String, TraceError> {
    fs::read_to_string(path).map_err(|source| TraceError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Parses a JSONL file, applying `check` to every decoded value. Blank lines
/// are ignored. In strict mode any issue fails the whole load and every
/// offending line is reported.
pub fn read_jsonl<T, F>(path: &Path, mode: LoadMode, check: F) -> Result<LoadOutcome<T>, TraceError>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<(), TraceError>,
{
    let contents = read_file(path)?;
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<T>(line)
            .map_err(|e| e.to_string())
            .and_then(|rec| check(&rec).map(|_| rec).map_err(|e| e.to_string()));
        match parsed {
            Ok(rec) => records.push(rec),
            Err(message) => issues.push(LineIssue {
                line: i + 1,
                message,
            }),
        }
    }
    if mode == LoadMode::Strict && !issues.is_empty() {
        return Err(TraceError::Load { issues });
    }
    Ok(LoadOutcome { records, issues })
}

pub fn load_trace_records(
    path: &Path,
    mode: LoadMode,
) -> Result<LoadOutcome<TraceRecord>, TraceError> {
    read_jsonl(path, mode, TraceRecord::validate)
}

/// Loads `{"id","query","answer"}` lines. Ids must be unique.
pub fn load_pairs(path: &Path, mode: LoadMode) -> Result<LoadOutcome<QAPair>, TraceError> {
    let mut outcome = read_jsonl(path, mode, QAPair::validate)?;
    let mut seen = std::collections::HashSet::new();
    let mut dupes = Vec::new();
    outcome.records.retain(|p| {
        let fresh = seen.insert(p.id.clone());
        if !fresh {
            dupes.push(p.id.clone());
        }
        fresh
    });
    if !dupes.is_empty() {
        let issue = LineIssue {
            line: 0,
            message: format!("duplicate pair ids: {}", dupes.join(", ")),
        };
        if mode == LoadMode::Strict {
            return Err(TraceError::Load {
                issues: vec![issue],
            });
        }
        outcome.issues.push(issue);
    }
    Ok(outcome)
}

/// Canonical JSONL: one compact object per line in declaration field order,
/// newline-terminated.
pub fn to_canonical_jsonl<T: Serialize>(records: &[T]) -> Result<String, serde_json::Error> {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), TraceError> {
    let io_err = |source| TraceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = serde_json::to_string(rec).map_err(|e| TraceError::Invalid(e.to_string()))?;
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn save_trace_records(path: &Path, records: &[TraceRecord]) -> Result<(), TraceError> {
    write_jsonl(path, records)
}
