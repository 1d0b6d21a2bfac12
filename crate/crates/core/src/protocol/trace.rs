//! Trace files: the encoded messages of one run as length-prefixed blocks
//! (`u32` little-endian length, then the bytes), plus a JSON index sidecar at
//! `<path>.index.json`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::message::{decode_message, Message, MessageSummary};
use crate::error::{Error, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub summary: MessageSummary,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceIndexEntry {
    /// Byte offset of the block's length prefix.
    pub offset: u64,
    pub length: u64,
    #[serde(flatten)]
    pub summary: MessageSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceIndex {
    pub schema_version: u32,
    pub scenario_id: String,
    pub mode: String,
    pub records: Vec<TraceIndexEntry>,
}

fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

/// Writes the block file and its index. Both go through a temporary file in
/// the same directory and are renamed into place.
pub fn write_trace(path: &Path, scenario_id: &str, mode: &str, records: &[TraceRecord]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut blocks = tempfile::NamedTempFile::new_in(dir)?;
    let mut entries = Vec::with_capacity(records.len());
    let mut offset = 0u64;
    for r in records {
        let len = u32::try_from(r.bytes.len()).map_err(|_| Error::invalid("message too large for a trace block"))?;
        blocks.write_all(&len.to_le_bytes())?;
        blocks.write_all(&r.bytes)?;
        entries.push(TraceIndexEntry {
            offset,
            length: r.bytes.len() as u64,
            summary: r.summary.clone(),
        });
        offset += 4 + r.bytes.len() as u64;
    }
    let index = TraceIndex {
        schema_version: TRACE_SCHEMA_VERSION,
        scenario_id: scenario_id.to_string(),
        mode: mode.to_string(),
        records: entries,
    };
    let mut idx = tempfile::NamedTempFile::new_in(dir)?;
    idx.write_all(serde_json::to_string_pretty(&index)?.as_bytes())?;
    blocks.persist(path).map_err(|e| Error::Io(e.error))?;
    idx.persist(index_path(path)).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Reads a trace back, checking every block against its index entry.
pub fn read_trace(path: &Path) -> Result<(TraceIndex, Vec<Message>)> {
    let bytes = fs::read(path)?;
    let index: TraceIndex = serde_json::from_str(&fs::read_to_string(index_path(path))?)?;
    if index.schema_version != TRACE_SCHEMA_VERSION {
        return Err(Error::format("trace index", format!("schema version {}", index.schema_version)));
    }
    let mut pos = 0usize;
    let mut messages = Vec::with_capacity(index.records.len());
    for (i, entry) in index.records.iter().enumerate() {
        if entry.offset != pos as u64 {
            return Err(Error::format("trace", format!("record {i} offset mismatch")));
        }
        let prefix = bytes
            .get(pos..pos + 4)
            .ok_or_else(|| Error::format("trace", format!("record {i} truncated")))?;
        let len = u32::from_le_bytes(prefix.try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(pos + 4..pos + 4 + len)
            .ok_or_else(|| Error::format("trace", format!("record {i} truncated")))?;
        let msg = decode_message(body)?;
        if msg.summary() != entry.summary || len as u64 != entry.length {
            return Err(Error::format("trace", format!("record {i} disagrees with the index")));
        }
        messages.push(msg);
        pos += 4 + len;
    }
    if pos != bytes.len() {
        return Err(Error::format("trace", "trailing bytes after the last record"));
    }
    Ok((index, messages))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PayloadRow {
    pub mode: String,
    pub kind: String,
    pub messages: usize,
    /// Frames in which at least one message of this kind was sent.
    pub frames: usize,
    pub bytes_per_message: f64,
    /// Total bytes of this kind divided by `frames`.
    pub bytes_per_frame: f64,
}

/// Per-kind payload statistics of a trace.
pub fn payload_report<'a>(mode: &str, summaries: impl IntoIterator<Item = &'a MessageSummary>) -> Vec<PayloadRow> {
    let mut acc: BTreeMap<&str, (usize, usize, BTreeSet<usize>)> = BTreeMap::new();
    for s in summaries {
        let e = acc.entry(s.kind.as_str()).or_default();
        e.0 += 1;
        e.1 += s.payload_bytes;
        e.2.insert(s.frame);
    }
    acc.into_iter()
        .map(|(kind, (n, bytes, frames))| PayloadRow {
            mode: mode.to_string(),
            kind: kind.to_string(),
            messages: n,
            frames: frames.len(),
            bytes_per_message: bytes as f64 / n as f64,
            bytes_per_frame: bytes as f64 / frames.len() as f64,
        })
        .collect()
}
