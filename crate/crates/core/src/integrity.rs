//! Checksummed file transfer and provenance records.
//!
//! Every byte that moves between the archive and a compute node goes through
//! [`transfer_verified`], which re-reads the destination and compares SHA-256
//! digests; a mismatch removes the partial copy and fails the transfer so the
//! surrounding job script can terminate. Finished runs are sealed with a
//! `provenance.json` binding outputs to inputs, container, user, and time.
//!
//! The digest algorithm is SHA-256 and its name is recorded inside every
//! provenance record so the format can change later without ambiguity.

use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Name of the digest algorithm recorded in receipts and provenance.
pub const CHECKSUM_ALGORITHM: &str = "sha256";

/// Name of the provenance file written into each derivative run directory.
pub const PROVENANCE_FILENAME: &str = "provenance.json";

const COPY_BUF_LEN: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum IntegrityError {
    #[error("unreadable: {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("unwritable: {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("integrity mismatch copying {src} -> {dst}: expected {expected}, destination hashed to {actual}")]
    IntegrityMismatch {
        src: PathBuf,
        dst: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("listed output missing: {0}")]
    OutputsMissing(PathBuf),
    #[error("output digest mismatch: {path} (expected {expected}, found {actual})")]
    OutputDigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("malformed provenance record: {0}")]
    MalformedRecord(String),
}

/// Receipt for one verified copy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReceipt {
    pub src: String,
    pub dst: String,
    pub digest: String,
    pub bytes: u64,
    pub elapsed_seconds: f64,
}

/// `{path, digest}` pair used for provenance input/output lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub digest: String,
}

/// Machine-readable record binding a finished run to its inputs, container,
/// user, and timestamps.
///
/// Serialized as `provenance.json` with canonical (sorted) key order, UTF-8,
/// and ISO-8601 UTC timestamps with a `Z` suffix. Input paths are recorded
/// relative to the dataset root as staged; output paths are relative to the
/// run directory holding the record. The record file itself is never listed
/// among the outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub pipeline_name: String,
    pub pipeline_version: String,
    pub container_digest: String,
    pub checksum_algorithm: String,
    pub started_at: String,
    pub finished_at: String,
    pub user: String,
    pub hostname: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

impl ProvenanceRecord {
    /// Structural validation: timestamp ordering, nonempty input/output
    /// lists, and exclusion of the record file itself.
    pub fn validate(&self) -> Result<(), IntegrityError> {
        let started = parse_utc(&self.started_at)
            .ok_or_else(|| bad_record(format!("bad started_at {:?}", self.started_at)))?;
        let finished = parse_utc(&self.finished_at)
            .ok_or_else(|| bad_record(format!("bad finished_at {:?}", self.finished_at)))?;
        if finished < started {
            return Err(bad_record("finished_at precedes started_at"));
        }
        if self.inputs.is_empty() {
            return Err(bad_record("inputs list is empty"));
        }
        if self.outputs.is_empty() {
            return Err(bad_record("outputs list is empty"));
        }
        if self
            .outputs
            .iter()
            .any(|o| Path::new(&o.path).file_name() == Some(PROVENANCE_FILENAME.as_ref()))
        {
            return Err(bad_record("outputs list the provenance record itself"));
        }
        Ok(())
    }
}

fn bad_record(msg: impl Into<String>) -> IntegrityError {
    IntegrityError::MalformedRecord(msg.into())
}

fn parse_utc(s: &str) -> Option<chrono::DateTime<chrono::Utc>> {
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.with_timezone(&chrono::Utc))
}

/// Current UTC time as the ISO-8601 `...Z` string used everywhere.
pub fn utc_now_string() -> String {
    chrono::Utc::now()
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

/// Streaming SHA-256 of a file, hex-encoded. Memory use is bounded
/// regardless of file size.
pub fn digest_file(path: &Path) -> Result<String, IntegrityError> {
    let mut file = File::open(path).map_err(|e| IntegrityError::Unreadable {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; COPY_BUF_LEN];
    loop {
        let n = file.read(&mut buf).map_err(|e| IntegrityError::Unreadable {
            path: path.to_path_buf(),
            source: e,
        })?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Copies `src` to `dst` and proves the copy by re-reading `dst` and
/// comparing digests. On mismatch the partial destination is removed and
/// `IntegrityMismatch` is returned, which callers treat as fatal.
pub fn transfer_verified(src: &Path, dst: &Path) -> Result<TransferReceipt, IntegrityError> {
    transfer_verified_with(src, dst, None)
}

/// [`transfer_verified`] with an optional post-write hook invoked on the
/// destination before verification. The simulator's fault injection uses the
/// hook to corrupt a staged file and exercise the mismatch path.
pub fn transfer_verified_with(
    src: &Path,
    dst: &Path,
    post_write: Option<&dyn Fn(&Path) -> io::Result<()>>,
) -> Result<TransferReceipt, IntegrityError> {
    let start = Instant::now();
    let mut reader = File::open(src).map_err(|e| IntegrityError::Unreadable {
        path: src.to_path_buf(),
        source: e,
    })?;
    if let Some(parent) = dst.parent() {
        fs::create_dir_all(parent).map_err(|e| IntegrityError::Unwritable {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    let unwritable = |e: io::Error| IntegrityError::Unwritable {
        path: dst.to_path_buf(),
        source: e,
    };
    let mut writer = File::create(dst).map_err(unwritable)?;

    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; COPY_BUF_LEN];
    let mut bytes = 0u64;
    loop {
        let n = match reader.read(&mut buf) {
            Ok(n) => n,
            Err(e) => {
                drop(writer);
                let _ = fs::remove_file(dst);
                return Err(IntegrityError::Unreadable {
                    path: src.to_path_buf(),
                    source: e,
                });
            }
        };
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        if let Err(e) = writer.write_all(&buf[..n]) {
            drop(writer);
            let _ = fs::remove_file(dst);
            return Err(unwritable(e));
        }
        bytes += n as u64;
    }
    if let Err(e) = writer.sync_all() {
        drop(writer);
        let _ = fs::remove_file(dst);
        return Err(unwritable(e));
    }
    drop(writer);
    let expected = hex::encode(hasher.finalize());

    if let Some(hook) = post_write {
        hook(dst).map_err(unwritable)?;
    }

    let actual = digest_file(dst)?;
    if actual != expected {
        let _ = fs::remove_file(dst);
        return Err(IntegrityError::IntegrityMismatch {
            src: src.to_path_buf(),
            dst: dst.to_path_buf(),
            expected,
            actual,
        });
    }
    // Clamp so the receipt's elapsed time is strictly positive even for
    // sub-resolution copies.
    let elapsed_seconds = start.elapsed().as_secs_f64().max(1e-9);
    Ok(TransferReceipt {
        src: src.to_string_lossy().into_owned(),
        dst: dst.to_string_lossy().into_owned(),
        digest: expected,
        bytes,
        elapsed_seconds,
    })
}

/// Verifies every listed output under `output_dir` and atomically writes
/// `provenance.json` (write-temp-then-rename). Nothing is written if any
/// output is missing or fails its digest.
pub fn write_provenance(
    record: &ProvenanceRecord,
    output_dir: &Path,
) -> Result<PathBuf, IntegrityError> {
    record.validate()?;
    for output in &record.outputs {
        let path = output_dir.join(&output.path);
        if !path.is_file() {
            return Err(IntegrityError::OutputsMissing(path));
        }
        let actual = digest_file(&path)?;
        if actual != output.digest {
            return Err(IntegrityError::OutputDigestMismatch {
                path,
                expected: output.digest.clone(),
                actual,
            });
        }
    }
    // serde_json maps sort keys, giving canonical key order.
    let value = serde_json::to_value(record).expect("record serializes");
    let text = serde_json::to_string_pretty(&value).expect("value serializes");

    let final_path = output_dir.join(PROVENANCE_FILENAME);
    let tmp_path = output_dir.join(format!("{PROVENANCE_FILENAME}.tmp"));
    let unwritable = |path: &Path, e: io::Error| IntegrityError::Unwritable {
        path: path.to_path_buf(),
        source: e,
    };
    let mut tmp = File::create(&tmp_path).map_err(|e| unwritable(&tmp_path, e))?;
    tmp.write_all(text.as_bytes())
        .and_then(|_| tmp.write_all(b"\n"))
        .and_then(|_| tmp.sync_all())
        .map_err(|e| unwritable(&tmp_path, e))?;
    drop(tmp);
    fs::rename(&tmp_path, &final_path).map_err(|e| unwritable(&final_path, e))?;
    Ok(final_path)
}

/// Reads and validates the provenance record in `dir`, if any.
pub fn read_provenance(dir: &Path) -> Result<ProvenanceRecord, IntegrityError> {
    let path = dir.join(PROVENANCE_FILENAME);
    let text = fs::read_to_string(&path).map_err(|e| IntegrityError::Unreadable {
        path: path.clone(),
        source: e,
    })?;
    let record: ProvenanceRecord = serde_json::from_str(&text)
        .map_err(|e| IntegrityError::MalformedRecord(e.to_string()))?;
    record.validate()?;
    Ok(record)
}

/// Completion state of a derivative run directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompletionState {
    Complete,
    Partial,
    Absent,
}

impl std::fmt::Display for CompletionState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CompletionState::Complete => "complete",
            CompletionState::Partial => "partial",
            CompletionState::Absent => "absent",
        };
        f.write_str(s)
    }
}

/// Decides whether a run directory represents a finished run.
///
/// `Complete` iff `provenance.json` parses and every listed output exists
/// with a matching digest; `Partial` for any other nonempty directory;
/// `Absent` when the directory is missing or empty. Output files without
/// provenance therefore never count as complete.
pub fn is_complete(output_dir: &Path) -> CompletionState {
    let entries = match fs::read_dir(output_dir) {
        Ok(iter) => iter.filter_map(Result::ok).collect::<Vec<_>>(),
        Err(_) => return CompletionState::Absent,
    };
    if entries.is_empty() {
        return CompletionState::Absent;
    }
    let record = match read_provenance(output_dir) {
        Ok(r) => r,
        Err(_) => return CompletionState::Partial,
    };
    for output in &record.outputs {
        let path = output_dir.join(&output.path);
        match digest_file(&path) {
            Ok(actual) if actual == output.digest => {}
            _ => return CompletionState::Partial,
        }
    }
    CompletionState::Complete
}
