//! BIDS filename grammar and dataset indexing.
//!
//! The archive stores exactly two modalities (T1w and DWI), so the grammar
//! here covers the entity subset `sub`, `ses`, `acq`, `dir`, `run` plus the
//! suffixes `T1w`/`dwi` and the extensions `.nii.gz`, `.json`, `.bval`,
//! `.bvec`. Anything else is rejected outright rather than passed through,
//! which keeps the dataset index unambiguous.
//!
//! Derivative outputs live under `derivatives/<pipeline>/sub-*/[ses-*]`
//! with no `anat`/`dwi` modality directories.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrity::{self, CompletionState};

#[derive(Debug, Error)]
pub enum BidsError {
    #[error("malformed BIDS name {name:?}: {reason}")]
    MalformedName { name: String, reason: String },
    #[error("dataset root not found: {0}")]
    RootNotFound(PathBuf),
    #[error("not a BIDS dataset (no sub-* entries and no derivatives/): {0}")]
    NotADataset(PathBuf),
    #[error("invalid pipeline name {0:?} (expected [A-Za-z0-9_-]+)")]
    InvalidPipelineName(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn malformed(name: &str, reason: impl Into<String>) -> BidsError {
    BidsError::MalformedName {
        name: name.to_string(),
        reason: reason.into(),
    }
}

/// Scan modality suffix. The archive organizes and processes only these two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Suffix {
    T1w,
    #[serde(rename = "dwi")]
    Dwi,
}

impl Suffix {
    pub fn as_str(&self) -> &'static str {
        match self {
            Suffix::T1w => "T1w",
            Suffix::Dwi => "dwi",
        }
    }

    /// Raw-side datatype directory for this suffix.
    pub fn datatype_dir(&self) -> &'static str {
        match self {
            Suffix::T1w => "anat",
            Suffix::Dwi => "dwi",
        }
    }

    pub fn parse(s: &str) -> Option<Suffix> {
        match s {
            "T1w" => Some(Suffix::T1w),
            "dwi" => Some(Suffix::Dwi),
            _ => None,
        }
    }
}

impl fmt::Display for Suffix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// File extension of an archive file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Extension {
    #[serde(rename = ".nii.gz")]
    NiiGz,
    #[serde(rename = ".json")]
    Json,
    #[serde(rename = ".bval")]
    Bval,
    #[serde(rename = ".bvec")]
    Bvec,
}

impl Extension {
    pub const ALL: [Extension; 4] = [
        Extension::NiiGz,
        Extension::Json,
        Extension::Bval,
        Extension::Bvec,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Extension::NiiGz => ".nii.gz",
            Extension::Json => ".json",
            Extension::Bval => ".bval",
            Extension::Bvec => ".bvec",
        }
    }
}

impl fmt::Display for Extension {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Parsed BIDS identity of one filename.
///
/// Entity order in a formatted name is fixed: `sub`, `ses`, `acq`, `dir`,
/// `run`, then the suffix and extension.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntitySet {
    pub subject: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub session: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub acquisition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub direction: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub run: Option<u32>,
    pub suffix: Suffix,
    pub extension: Extension,
}

/// True for labels matching `[A-Za-z0-9]+`.
pub fn is_valid_label(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric())
}

impl EntitySet {
    /// Checks the type invariants: label alphabet, run positivity, and the
    /// bval/bvec-implies-dwi rule.
    pub fn validate(&self) -> Result<(), BidsError> {
        let check_label = |field: &str, value: &str| {
            if is_valid_label(value) {
                Ok(())
            } else {
                Err(malformed(
                    value,
                    format!("{field} label must match [A-Za-z0-9]+"),
                ))
            }
        };
        check_label("subject", &self.subject)?;
        if let Some(s) = &self.session {
            check_label("session", s)?;
        }
        if let Some(a) = &self.acquisition {
            check_label("acquisition", a)?;
        }
        if let Some(d) = &self.direction {
            check_label("direction", d)?;
        }
        if self.run == Some(0) {
            return Err(malformed(
                &format_bids_name(self),
                "run index must be positive",
            ));
        }
        if matches!(self.extension, Extension::Bval | Extension::Bvec)
            && self.suffix != Suffix::Dwi
        {
            return Err(malformed(
                self.extension.as_str(),
                format!("{} permitted only with suffix dwi", self.extension),
            ));
        }
        Ok(())
    }

    /// The filename this entity set formats to.
    pub fn filename(&self) -> String {
        format_bids_name(self)
    }

    /// `sub-<subject>/[ses-<session>/]<datatype>/` prefix for the raw side.
    pub fn raw_relative_path(&self) -> String {
        let mut p = format!("sub-{}", self.subject);
        if let Some(ses) = &self.session {
            p.push_str(&format!("/ses-{ses}"));
        }
        p.push('/');
        p.push_str(self.suffix.datatype_dir());
        p.push('/');
        p.push_str(&self.filename());
        p
    }
}

impl fmt::Display for EntitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.filename())
    }
}

/// Formats an entity set back into its filename.
///
/// Inverse of [`parse_bids_name`]; omitted optional entities contribute
/// nothing.
pub fn format_bids_name(entities: &EntitySet) -> String {
    let mut name = format!("sub-{}", entities.subject);
    if let Some(ses) = &entities.session {
        name.push_str(&format!("_ses-{ses}"));
    }
    if let Some(acq) = &entities.acquisition {
        name.push_str(&format!("_acq-{acq}"));
    }
    if let Some(dir) = &entities.direction {
        name.push_str(&format!("_dir-{dir}"));
    }
    if let Some(run) = entities.run {
        name.push_str(&format!("_run-{run}"));
    }
    name.push('_');
    name.push_str(entities.suffix.as_str());
    name.push_str(entities.extension.as_str());
    name
}

/// Parses a bare BIDS filename into its entities.
///
/// The returned set formats back to the input byte-for-byte; any name the
/// grammar cannot produce is rejected with `MalformedName`. Run indices are
/// stored as integers, so zero-padded forms like `run-01` (which could not
/// round-trip) are rejected.
pub fn parse_bids_name(filename: &str) -> Result<EntitySet, BidsError> {
    if filename.contains('/') || filename.contains('\\') {
        return Err(malformed(filename, "expected a bare filename"));
    }
    let (stem, extension) = split_extension(filename)
        .ok_or_else(|| malformed(filename, "unknown extension"))?;

    let mut parts = stem.split('_').collect::<Vec<_>>();
    if parts.len() < 2 {
        return Err(malformed(filename, "expected sub-<label> and a suffix"));
    }
    let suffix_token = parts.pop().expect("len checked");
    let suffix = Suffix::parse(suffix_token)
        .ok_or_else(|| malformed(filename, format!("unknown suffix {suffix_token:?}")))?;

    // Entities must appear in canonical order, each at most once.
    const ORDER: [&str; 5] = ["sub", "ses", "acq", "dir", "run"];
    let mut values: [Option<&str>; 5] = [None; 5];
    let mut cursor = 0usize;
    for token in parts {
        let (key, value) = token
            .split_once('-')
            .ok_or_else(|| malformed(filename, format!("entity {token:?} is not key-value")))?;
        let slot = ORDER
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| malformed(filename, format!("unknown entity {key:?}")))?;
        if values[slot].is_some() {
            return Err(malformed(filename, format!("duplicate entity {key:?}")));
        }
        if slot < cursor {
            return Err(malformed(filename, format!("entity {key:?} out of order")));
        }
        if value.is_empty() {
            return Err(malformed(filename, format!("empty label for {key:?}")));
        }
        values[slot] = Some(value);
        cursor = slot + 1;
    }

    let subject = values[0]
        .ok_or_else(|| malformed(filename, "missing sub- entity"))?
        .to_string();
    let run = match values[4] {
        None => None,
        Some(digits) => Some(parse_run_index(filename, digits)?),
    };
    let entities = EntitySet {
        subject,
        session: values[1].map(str::to_string),
        acquisition: values[2].map(str::to_string),
        direction: values[3].map(str::to_string),
        run,
        suffix,
        extension,
    };
    entities.validate()?;
    debug_assert_eq!(format_bids_name(&entities), filename);
    Ok(entities)
}

fn parse_run_index(filename: &str, digits: &str) -> Result<u32, BidsError> {
    if !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(filename, format!("run index {digits:?} is not numeric")));
    }
    if digits.starts_with('0') {
        // `run-01` would format back as `run-1`, breaking round-tripping.
        return Err(malformed(
            filename,
            format!("run index {digits:?} has a leading zero"),
        ));
    }
    digits
        .parse::<u32>()
        .map_err(|_| malformed(filename, format!("run index {digits:?} out of range")))
}

fn split_extension(filename: &str) -> Option<(&str, Extension)> {
    // Longest match first so `.nii.gz` wins over a hypothetical `.gz`.
    for ext in Extension::ALL {
        if let Some(stem) = filename.strip_suffix(ext.as_str()) {
            if stem.is_empty() {
                return None;
            }
            return Some((stem, ext));
        }
    }
    None
}

/// Returns `derivatives/<pipeline_name>/sub-<subject>[/ses-<session>]`.
///
/// Derivative trees carry no `anat`/`dwi` datatype component; many pipelines
/// consume multimodal input, so outputs are grouped per pipeline only.
pub fn derivative_dir(
    pipeline_name: &str,
    subject: &str,
    session: Option<&str>,
) -> Result<String, BidsError> {
    if !is_valid_pipeline_name(pipeline_name) {
        return Err(BidsError::InvalidPipelineName(pipeline_name.to_string()));
    }
    let mut dir = format!("derivatives/{pipeline_name}/sub-{subject}");
    if let Some(ses) = session {
        dir.push_str(&format!("/ses-{ses}"));
    }
    Ok(dir)
}

/// True for pipeline names matching `[A-Za-z0-9_-]+`.
pub fn is_valid_pipeline_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// One indexed archive file: its BIDS identity plus sidecar metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRecord {
    /// Path relative to the dataset root, e.g. `sub-01/anat/sub-01_T1w.nii.gz`.
    pub relative_path: String,
    pub entities: EntitySet,
    /// Contents of the matching `.json` sidecar, empty when absent.
    #[serde(default)]
    pub sidecar: BTreeMap<String, serde_json::Value>,
    pub byte_size: u64,
}

/// Key identifying one scanning session within a dataset.
pub type SessionKey = (String, Option<String>);

/// Key identifying one derivative run directory.
pub type DerivativeKey = (String, String, Option<String>);

/// A structured diagnostic raised while indexing; never fatal.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IndexWarning {
    pub path: String,
    pub reason: String,
}

impl IndexWarning {
    /// Renders as the diagnostic-stream line `WARN <path> <reason>`.
    pub fn to_line(&self) -> String {
        format!("WARN {} {}", self.path, self.reason)
    }
}

/// Immutable index of one BIDS dataset: raw scans by session plus the
/// completion state of every derivative run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub dataset_name: String,
    /// Serialized as a sorted entry list; JSON has no tuple keys.
    #[serde(with = "session_map")]
    pub sessions: BTreeMap<SessionKey, Vec<ScanRecord>>,
    #[serde(with = "derivative_map")]
    pub derivative_runs: BTreeMap<DerivativeKey, CompletionState>,
    pub warnings: Vec<IndexWarning>,
}

mod session_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        subject: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        session: Option<String>,
        scans: Vec<ScanRecord>,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<SessionKey, Vec<ScanRecord>>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|((subject, session), scans)| Entry {
                subject: subject.clone(),
                session: session.clone(),
                scans: scans.clone(),
            })
            .collect();
        entries.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<SessionKey, Vec<ScanRecord>>, D::Error> {
        let entries = Vec::<Entry>::deserialize(de)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.subject, e.session), e.scans))
            .collect())
    }
}

mod derivative_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        pipeline: String,
        subject: String,
        #[serde(skip_serializing_if = "Option::is_none", default)]
        session: Option<String>,
        state: CompletionState,
    }

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<DerivativeKey, CompletionState>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = map
            .iter()
            .map(|((pipeline, subject, session), state)| Entry {
                pipeline: pipeline.clone(),
                subject: subject.clone(),
                session: session.clone(),
                state: *state,
            })
            .collect();
        entries.serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<DerivativeKey, CompletionState>, D::Error> {
        let entries = Vec::<Entry>::deserialize(de)?;
        Ok(entries
            .into_iter()
            .map(|e| ((e.pipeline, e.subject, e.session), e.state))
            .collect())
    }
}

impl DatasetIndex {
    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }

    pub fn file_count(&self) -> usize {
        self.sessions.values().map(Vec::len).sum()
    }

    /// Completion state for a pipeline/session pair; `Absent` when the
    /// derivative directory does not exist at all.
    pub fn completion(
        &self,
        pipeline_name: &str,
        subject: &str,
        session: Option<&str>,
    ) -> CompletionState {
        let key = (
            pipeline_name.to_string(),
            subject.to_string(),
            session.map(str::to_string),
        );
        self.derivative_runs
            .get(&key)
            .copied()
            .unwrap_or(CompletionState::Absent)
    }

    /// Scans of one session, None if the session is unknown.
    pub fn session_scans(&self, subject: &str, session: Option<&str>) -> Option<&[ScanRecord]> {
        let key = (subject.to_string(), session.map(str::to_string));
        self.sessions.get(&key).map(Vec::as_slice)
    }
}

/// Walks a dataset root and builds its index.
///
/// Files that fail to parse or sit at a path inconsistent with their
/// entities become warnings, not errors. Symbolic links are followed one
/// level and recorded with their link-side path; broken links are warnings.
/// The result is canonical: identical trees index identically regardless of
/// filesystem enumeration order.
pub fn index_dataset(root: &Path) -> Result<DatasetIndex, BidsError> {
    if !root.is_dir() {
        return Err(BidsError::RootNotFound(root.to_path_buf()));
    }
    let dataset_name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| ".".to_string());

    let mut subject_dirs = Vec::new();
    let mut has_derivatives = false;
    for entry in sorted_entries(root)? {
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path();
        if path.is_dir() {
            if name.starts_with("sub-") {
                subject_dirs.push(path);
            } else if name == "derivatives" {
                has_derivatives = true;
            }
        }
    }
    if subject_dirs.is_empty() && !has_derivatives {
        return Err(BidsError::NotADataset(root.to_path_buf()));
    }

    let mut index = DatasetIndex {
        dataset_name,
        sessions: BTreeMap::new(),
        derivative_runs: BTreeMap::new(),
        warnings: Vec::new(),
    };

    for subject_dir in subject_dirs {
        index_subject_tree(root, &subject_dir, &mut index)?;
    }
    if has_derivatives {
        index_derivatives(root, &mut index)?;
    }
    index.warnings.sort();
    Ok(index)
}

fn sorted_entries(dir: &Path) -> Result<Vec<fs::DirEntry>, BidsError> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| BidsError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| BidsError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    entries.sort_by_key(|e| e.file_name());
    Ok(entries)
}

fn index_subject_tree(
    root: &Path,
    subject_dir: &Path,
    index: &mut DatasetIndex,
) -> Result<(), BidsError> {
    let mut files = Vec::new();
    collect_files(root, subject_dir, &mut files, &mut index.warnings)?;

    // Sidecar lookup: basename stem -> parsed JSON map.
    let mut sidecars: BTreeMap<String, BTreeMap<String, serde_json::Value>> = BTreeMap::new();
    for (rel, abs) in &files {
        if let Some(stem) = rel.strip_suffix(".json") {
            match fs::read_to_string(abs)
                .map_err(|e| e.to_string())
                .and_then(|text| {
                    serde_json::from_str::<BTreeMap<String, serde_json::Value>>(&text)
                        .map_err(|e| e.to_string())
                }) {
                Ok(map) => {
                    sidecars.insert(stem.to_string(), map);
                }
                Err(reason) => index.warnings.push(IndexWarning {
                    path: rel.clone(),
                    reason: format!("unreadable sidecar: {reason}"),
                }),
            }
        }
    }

    for (rel, abs) in files {
        let filename = rel.rsplit('/').next().unwrap_or(&rel);
        let entities = match parse_bids_name(filename) {
            Ok(e) => e,
            Err(err) => {
                index.warnings.push(IndexWarning {
                    path: rel.clone(),
                    reason: err.to_string(),
                });
                continue;
            }
        };
        if rel != entities.raw_relative_path() {
            index.warnings.push(IndexWarning {
                path: rel.clone(),
                reason: format!(
                    "path inconsistent with entities (expected {})",
                    entities.raw_relative_path()
                ),
            });
            continue;
        }
        let byte_size = match fs::metadata(&abs) {
            Ok(m) => m.len(),
            Err(e) => {
                index.warnings.push(IndexWarning {
                    path: rel.clone(),
                    reason: format!("unreadable: {e}"),
                });
                continue;
            }
        };
        let sidecar = if entities.extension == Extension::NiiGz {
            let stem = rel
                .strip_suffix(".nii.gz")
                .expect("extension matched")
                .to_string();
            sidecars.get(&stem).cloned().unwrap_or_default()
        } else {
            BTreeMap::new()
        };
        let key = (entities.subject.clone(), entities.session.clone());
        index.sessions.entry(key).or_default().push(ScanRecord {
            relative_path: rel,
            entities,
            sidecar,
            byte_size,
        });
    }

    for records in index.sessions.values_mut() {
        records.sort_by(|a, b| a.relative_path.cmp(&b.relative_path));
    }
    Ok(())
}

/// Collects `(dataset-relative path, absolute path)` for every regular file
/// under `dir`, recursing into subdirectories. Broken symlinks are warnings.
fn collect_files(
    root: &Path,
    dir: &Path,
    out: &mut Vec<(String, PathBuf)>,
    warnings: &mut Vec<IndexWarning>,
) -> Result<(), BidsError> {
    for entry in sorted_entries(dir)? {
        let path = entry.path();
        let rel = path
            .strip_prefix(root)
            .expect("entry under root")
            .to_string_lossy()
            .into_owned();
        // metadata() follows symlinks; a broken link reports as an error here.
        match fs::metadata(&path) {
            Ok(meta) if meta.is_dir() => collect_files(root, &path, out, warnings)?,
            Ok(meta) if meta.is_file() => out.push((rel, path)),
            Ok(_) => warnings.push(IndexWarning {
                path: rel,
                reason: "not a regular file".to_string(),
            }),
            Err(e) => warnings.push(IndexWarning {
                path: rel,
                reason: format!("broken link or unreadable: {e}"),
            }),
        }
    }
    Ok(())
}

/// Enumerates derivative run directories: one per
/// `derivatives/<pipeline>/sub-*[/ses-*]` leaf, sessionless when a subject
/// directory has no `ses-*` children. Missing `derivatives/` yields an
/// empty list.
pub fn derivative_run_dirs(root: &Path) -> Result<Vec<(DerivativeKey, PathBuf)>, BidsError> {
    let deriv_root = root.join("derivatives");
    if !deriv_root.is_dir() {
        return Ok(Vec::new());
    }
    let mut runs = Vec::new();
    for pipeline_entry in sorted_entries(&deriv_root)? {
        let pipeline_dir = pipeline_entry.path();
        if !pipeline_dir.is_dir() {
            continue;
        }
        let pipeline_name = pipeline_entry.file_name().to_string_lossy().into_owned();
        for subject_entry in sorted_entries(&pipeline_dir)? {
            let subject_dir = subject_entry.path();
            let subject_name = subject_entry.file_name().to_string_lossy().into_owned();
            let Some(subject) = subject_name.strip_prefix("sub-") else {
                continue;
            };
            if !subject_dir.is_dir() {
                continue;
            }
            let session_dirs: Vec<(String, PathBuf)> = sorted_entries(&subject_dir)?
                .into_iter()
                .filter(|e| e.path().is_dir())
                .filter_map(|e| {
                    let name = e.file_name().to_string_lossy().into_owned();
                    name.strip_prefix("ses-")
                        .map(|ses| (ses.to_string(), e.path()))
                })
                .collect();
            if session_dirs.is_empty() {
                runs.push((
                    (pipeline_name.clone(), subject.to_string(), None),
                    subject_dir,
                ));
            } else {
                for (session, dir) in session_dirs {
                    runs.push((
                        (pipeline_name.clone(), subject.to_string(), Some(session)),
                        dir,
                    ));
                }
            }
        }
    }
    Ok(runs)
}

fn index_derivatives(root: &Path, index: &mut DatasetIndex) -> Result<(), BidsError> {
    for (key, dir) in derivative_run_dirs(root)? {
        index.derivative_runs.insert(key, integrity::is_complete(&dir));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t1w(subject: &str) -> EntitySet {
        EntitySet {
            subject: subject.to_string(),
            session: None,
            acquisition: None,
            direction: None,
            run: None,
            suffix: Suffix::T1w,
            extension: Extension::NiiGz,
        }
    }

    #[test]
    fn parse_full_name() {
        let e = parse_bids_name("sub-01_ses-02_run-1_T1w.nii.gz").unwrap();
        assert_eq!(e.subject, "01");
        assert_eq!(e.session.as_deref(), Some("02"));
        assert_eq!(e.run, Some(1));
        assert_eq!(e.suffix, Suffix::T1w);
        assert_eq!(e.extension, Extension::NiiGz);
        assert_eq!(e.acquisition, None);
        assert_eq!(e.direction, None);
    }

    #[test]
    fn parse_minimal_name() {
        let e = parse_bids_name("sub-ABC_dwi.bval").unwrap();
        assert_eq!(e.subject, "ABC");
        assert_eq!(e.session, None);
        assert_eq!(e.suffix, Suffix::Dwi);
        assert_eq!(e.extension, Extension::Bval);
    }

    #[test]
    fn parse_rejects_out_of_order() {
        assert!(matches!(
            parse_bids_name("T1w_sub-01.nii.gz"),
            Err(BidsError::MalformedName { .. })
        ));
        assert!(matches!(
            parse_bids_name("sub-01_run-1_ses-02_T1w.nii.gz"),
            Err(BidsError::MalformedName { .. })
        ));
    }

    #[test]
    fn parse_rejects_bval_for_t1w() {
        assert!(parse_bids_name("sub-01_T1w.bval").is_err());
        assert!(parse_bids_name("sub-01_T1w.bvec").is_err());
        assert!(parse_bids_name("sub-01_dwi.bvec").is_ok());
    }

    #[test]
    fn parse_rejects_padded_or_zero_run() {
        assert!(parse_bids_name("sub-01_run-01_T1w.nii.gz").is_err());
        assert!(parse_bids_name("sub-01_run-0_T1w.nii.gz").is_err());
    }

    #[test]
    fn format_minimal_and_acq() {
        assert_eq!(format_bids_name(&t1w("01")), "sub-01_T1w.nii.gz");
        let e = EntitySet {
            session: Some("02".into()),
            acquisition: Some("hires".into()),
            extension: Extension::Json,
            ..t1w("01")
        };
        assert_eq!(format_bids_name(&e), "sub-01_ses-02_acq-hires_T1w.json");
    }

    #[test]
    fn derivative_dir_layout() {
        assert_eq!(
            derivative_dir("PreQual", "01", Some("02")).unwrap(),
            "derivatives/PreQual/sub-01/ses-02"
        );
        assert_eq!(
            derivative_dir("freesurfer", "A7", None).unwrap(),
            "derivatives/freesurfer/sub-A7"
        );
        assert!(matches!(
            derivative_dir("bad name", "01", Some("01")),
            Err(BidsError::InvalidPipelineName(_))
        ));
    }

    #[test]
    fn index_single_scan_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        std::fs::create_dir_all(root.join("sub-01/anat")).unwrap();
        std::fs::write(root.join("sub-01/anat/sub-01_T1w.nii.gz"), b"x").unwrap();
        let index = index_dataset(&root).unwrap();
        assert_eq!(index.session_count(), 1);
        assert_eq!(index.file_count(), 1);
        assert!(index.derivative_runs.is_empty());
        assert!(index.warnings.is_empty());
    }

    #[test]
    fn index_empty_dir_is_not_a_dataset() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            index_dataset(tmp.path()),
            Err(BidsError::NotADataset(_))
        ));
        assert!(matches!(
            index_dataset(&tmp.path().join("missing")),
            Err(BidsError::RootNotFound(_))
        ));
    }

    #[test]
    fn index_collects_warnings_for_unparseable_files() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        std::fs::create_dir_all(root.join("sub-01/anat")).unwrap();
        std::fs::write(root.join("sub-01/anat/sub-01_T1w.nii.gz"), b"x").unwrap();
        std::fs::write(root.join("sub-01/anat/notes.txt"), b"n").unwrap();
        // Right grammar, wrong directory for its entities.
        std::fs::write(root.join("sub-01/anat/sub-02_T1w.nii.gz"), b"y").unwrap();
        let index = index_dataset(&root).unwrap();
        assert_eq!(index.file_count(), 1);
        assert_eq!(index.warnings.len(), 2);
        assert!(index.warnings[0].to_line().starts_with("WARN "));
    }

    #[test]
    fn index_reads_sidecar_for_image() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        std::fs::create_dir_all(root.join("sub-01/anat")).unwrap();
        std::fs::write(root.join("sub-01/anat/sub-01_T1w.nii.gz"), b"x").unwrap();
        std::fs::write(
            root.join("sub-01/anat/sub-01_T1w.json"),
            br#"{"ProtocolName":"MPRAGE"}"#,
        )
        .unwrap();
        let index = index_dataset(&root).unwrap();
        let scans = index.session_scans("01", None).unwrap();
        let image = scans
            .iter()
            .find(|r| r.entities.extension == Extension::NiiGz)
            .unwrap();
        assert_eq!(
            image.sidecar.get("ProtocolName"),
            Some(&serde_json::Value::String("MPRAGE".into()))
        );
    }

    #[test]
    fn index_is_deterministic() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().join("ds");
        for sub in ["01", "02", "03"] {
            let dir = root.join(format!("sub-{sub}/anat"));
            std::fs::create_dir_all(&dir).unwrap();
            std::fs::write(dir.join(format!("sub-{sub}_T1w.nii.gz")), sub).unwrap();
        }
        let a = index_dataset(&root).unwrap();
        let b = index_dataset(&root).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    prop_compose! {
        fn arb_label()(s in "[A-Za-z0-9]{1,8}") -> String { s }
    }

    fn arb_entity_set() -> impl Strategy<Value = EntitySet> {
        (
            arb_label(),
            proptest::option::of(arb_label()),
            proptest::option::of(arb_label()),
            proptest::option::of(arb_label()),
            proptest::option::of(1u32..=999),
            0usize..=3,
        )
            .prop_map(|(subject, session, acquisition, direction, run, ext_pick)| {
                // bval/bvec force dwi to keep the invariant satisfied.
                let extension = Extension::ALL[ext_pick];
                let suffix = match extension {
                    Extension::Bval | Extension::Bvec => Suffix::Dwi,
                    _ => {
                        if ext_pick % 2 == 0 {
                            Suffix::T1w
                        } else {
                            Suffix::Dwi
                        }
                    }
                };
                EntitySet {
                    subject,
                    session,
                    acquisition,
                    direction,
                    run,
                    suffix,
                    extension,
                }
            })
    }

    proptest! {
        #[test]
        fn roundtrip_format_then_parse(e in arb_entity_set()) {
            let name = format_bids_name(&e);
            let parsed = parse_bids_name(&name).unwrap();
            prop_assert_eq!(parsed, e);
        }

        #[test]
        fn derivative_dir_has_no_datatype_component(
            pipeline in "[A-Za-z0-9_-]{1,12}",
            subject in "[A-Za-z0-9]{1,6}",
            session in proptest::option::of("[A-Za-z0-9]{1,6}"),
        ) {
            prop_assume!(pipeline != "anat" && pipeline != "dwi");
            let dir = derivative_dir(&pipeline, &subject, session.as_deref()).unwrap();
            for segment in dir.split('/') {
                prop_assert_ne!(segment, "anat");
                prop_assert_ne!(segment, "dwi");
            }
            prop_assert!(dir.starts_with("derivatives/"));
        }
    }
}
