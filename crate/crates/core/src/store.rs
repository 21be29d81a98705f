//! Record storage shared by the session server and the module registry.
//!
//! The file backend writes a header line, one JSON record per line, and a
//! trailer line carrying the record count. Saves go to a sibling temp file that
//! is synced and then renamed over the target, so a crash leaves either the old
//! or the new version on disk. A missing or short trailer means truncation.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

const FORMAT: &str = "teleop-store";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StoreError {
    #[error("store I/O error: {0}")]
    Io(String),
    #[error("corrupt store at line {line}{}: {reason}", record.map(|r| format!(" (record {r})")).unwrap_or_default())]
    Corrupt {
        line: usize,
        record: Option<usize>,
        reason: String,
    },
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

/// An ordered list of text records, replaced atomically as a whole.
pub trait RecordStore: Send + Sync {
    /// `Ok(None)` for a store that has never been written.
    fn load(&self) -> Result<Option<Vec<String>>, StoreError>;
    fn save(&self, records: &[String]) -> Result<(), StoreError>;
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    records: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Trailer {
    end: usize,
}

#[derive(Debug, Clone)]
pub struct FileStore {
    path: PathBuf,
}

impl FileStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn temp_path(&self) -> PathBuf {
        let mut name = self.path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".tmp");
        self.path.with_file_name(name)
    }
}

fn corrupt(line: usize, record: Option<usize>, reason: impl Into<String>) -> StoreError {
    StoreError::Corrupt {
        line,
        record,
        reason: reason.into(),
    }
}

/// Parses the file format; exposed for tests that inject faults.
pub fn parse_store_text(text: &str) -> Result<Vec<String>, StoreError> {
    let mut lines = text.split('\n').collect::<Vec<_>>();
    if lines.last() == Some(&"") {
        lines.pop();
    } else {
        return Err(corrupt(lines.len(), None, "missing final newline (truncated write)"));
    }
    let header_line = lines.first().ok_or_else(|| corrupt(1, None, "empty store"))?;
    let header: Header =
        serde_json::from_str(header_line).map_err(|e| corrupt(1, None, format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != FORMAT_VERSION {
        return Err(corrupt(1, None, "unsupported store format"));
    }
    if lines.len() != header.records + 2 {
        let record = lines.len().saturating_sub(1);
        return Err(corrupt(
            lines.len(),
            Some(record),
            format!("expected {} records, file holds {} lines", header.records, lines.len()),
        ));
    }
    let trailer_line = lines[lines.len() - 1];
    let trailer: Trailer = serde_json::from_str(trailer_line)
        .map_err(|e| corrupt(lines.len(), None, format!("bad trailer: {e}")))?;
    if trailer.end != header.records {
        return Err(corrupt(lines.len(), None, "trailer count does not match header"));
    }
    let mut out = Vec::with_capacity(header.records);
    for (i, line) in lines[1..lines.len() - 1].iter().enumerate() {
        if serde_json::from_str::<serde_json::Value>(line).is_err() {
            return Err(corrupt(i + 2, Some(i), "record is not valid JSON"));
        }
        out.push((*line).to_string());
    }
    Ok(out)
}

pub fn render_store_text(records: &[String]) -> Result<String, StoreError> {
    let mut text = serde_json::to_string(&Header {
        format: FORMAT.to_string(),
        version: FORMAT_VERSION,
        records: records.len(),
    })
    .map_err(|e| StoreError::Io(e.to_string()))?;
    text.push('\n');
    for (i, rec) in records.iter().enumerate() {
        if rec.contains('\n') {
            return Err(StoreError::Io(format!("record {i} contains a newline")));
        }
        text.push_str(rec);
        text.push('\n');
    }
    text.push_str(&format!("{{\"end\":{}}}\n", records.len()));
    Ok(text)
}

impl RecordStore for FileStore {
    fn load(&self) -> Result<Option<Vec<String>>, StoreError> {
        match fs::read_to_string(&self.path) {
            Ok(text) => parse_store_text(&text).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    fn save(&self, records: &[String]) -> Result<(), StoreError> {
        let text = render_store_text(records)?;
        let tmp = self.temp_path();
        {
            let mut file = File::create(&tmp)?;
            file.write_all(text.as_bytes())?;
            file.sync_all()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct MemoryStore {
    records: Mutex<Option<Vec<String>>>,
    fail_writes: std::sync::atomic::AtomicBool,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes later saves fail, for error-path tests.
    pub fn fail_writes(&self, fail: bool) {
        self.fail_writes.store(fail, std::sync::atomic::Ordering::SeqCst);
    }
}

impl RecordStore for MemoryStore {
    fn load(&self) -> Result<Option<Vec<String>>, StoreError> {
        Ok(self.records.lock().clone())
    }

    fn save(&self, records: &[String]) -> Result<(), StoreError> {
        if self.fail_writes.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(StoreError::Io("injected write failure".into()));
        }
        *self.records.lock() = Some(records.to_vec());
        Ok(())
    }
}
