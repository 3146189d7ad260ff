//! Operator reports: archive storage usage and scheduler queue state.
//!
//! The storage report walks every dataset under the archive parent and sums
//! real bytes — a symbolic link and its target count once, per the
//! link-farm rule. The queue report normalizes either a simulator report or
//! scheduler queue-listing text (e.g. `squeue --noheader -o "%i %j %t"`)
//! supplied via file or stdin, so the tool stays testable on machines
//! without a scheduler.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bids::{self, Extension};
use crate::simsched::{FinalState, SimReport};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("archive root not found: {0}")]
    ArchiveRootNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Usage of one dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetUsage {
    pub dataset_name: String,
    pub total_bytes: u64,
    pub file_count: u64,
    pub raw_image_count: u64,
}

/// Whole-archive usage; grand totals equal the column sums.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub rows: Vec<DatasetUsage>,
    pub total_bytes: u64,
    pub total_files: u64,
    pub total_raw_images: u64,
}

impl StorageReport {
    /// Aligned text table with a TOTAL row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>16} {:>12} {:>12}\n",
            "dataset", "total_bytes", "file_count", "raw_images"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<24} {:>16} {:>12} {:>12}\n",
                row.dataset_name, row.total_bytes, row.file_count, row.raw_image_count
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>16} {:>12} {:>12}\n",
            "TOTAL", self.total_bytes, self.total_files, self.total_raw_images
        ));
        out
    }

    /// CSV, one row per dataset plus a TOTAL row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,total_bytes,file_count,raw_image_count\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.dataset_name, row.total_bytes, row.file_count, row.raw_image_count
            ));
        }
        out.push_str(&format!(
            "TOTAL,{},{},{}\n",
            self.total_bytes, self.total_files, self.total_raw_images
        ));
        out
    }
}

/// Walks all datasets under `archive_root` and sums storage usage.
/// Links are resolved and deduplicated by canonical target, so a link farm
/// never double-counts.
pub fn storage_report(archive_root: &Path) -> Result<StorageReport, ReportError> {
    if !archive_root.is_dir() {
        return Err(ReportError::ArchiveRootNotFound(archive_root.to_path_buf()));
    }
    let mut datasets: Vec<PathBuf> = fs::read_dir(archive_root)
        .map_err(|e| ReportError::Io {
            path: archive_root.to_path_buf(),
            source: e,
        })?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter(|p| {
            !p.file_name()
                .map(|n| n.to_string_lossy().starts_with('.'))
                .unwrap_or(true)
        })
        .collect();
    datasets.sort();

    let mut rows = Vec::new();
    let mut seen_real: BTreeSet<PathBuf> = BTreeSet::new();
    for dataset_dir in datasets {
        let dataset_name = dataset_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut usage = DatasetUsage {
            dataset_name,
            total_bytes: 0,
            file_count: 0,
            raw_image_count: 0,
        };
        walk_dataset(&dataset_dir, &dataset_dir, &mut usage, &mut seen_real)?;
        rows.push(usage);
    }
    let total_bytes = rows.iter().map(|r| r.total_bytes).sum();
    let total_files = rows.iter().map(|r| r.file_count).sum();
    let total_raw_images = rows.iter().map(|r| r.raw_image_count).sum();
    Ok(StorageReport {
        rows,
        total_bytes,
        total_files,
        total_raw_images,
    })
}

fn walk_dataset(
    dataset_root: &Path,
    dir: &Path,
    usage: &mut DatasetUsage,
    seen_real: &mut BTreeSet<PathBuf>,
) -> Result<(), ReportError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| ReportError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .collect();
    entries.sort();
    for path in entries {
        let Ok(meta) = fs::metadata(&path) else {
            continue; // broken link
        };
        if meta.is_dir() {
            walk_dataset(dataset_root, &path, usage, seen_real)?;
            continue;
        }
        if !meta.is_file() {
            continue;
        }
        let real = fs::canonicalize(&path).unwrap_or_else(|_| path.clone());
        if !seen_real.insert(real) {
            continue; // link target already counted
        }
        usage.total_bytes += meta.len();
        usage.file_count += 1;
        if is_raw_image(dataset_root, &path) {
            usage.raw_image_count += 1;
        }
    }
    Ok(())
}

/// A raw image is a parseable `.nii.gz` under a `sub-*` tree (not under
/// `derivatives/`).
fn is_raw_image(dataset_root: &Path, path: &Path) -> bool {
    let Ok(rel) = path.strip_prefix(dataset_root) else {
        return false;
    };
    let mut components = rel.components();
    let Some(first) = components.next() else {
        return false;
    };
    if !first.as_os_str().to_string_lossy().starts_with("sub-") {
        return false;
    }
    let Some(name) = path.file_name().map(|n| n.to_string_lossy()) else {
        return false;
    };
    matches!(
        bids::parse_bids_name(&name),
        Ok(e) if e.extension == Extension::NiiGz
    )
}

/// Normalized job state across queue sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueSource {
    Sim,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueRow {
    pub job_id: String,
    pub state: JobState,
    pub pipeline_name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub array_index: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueReport {
    pub source: QueueSource,
    pub rows: Vec<QueueRow>,
    /// Diagnostics for skipped or unrecognized input lines.
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl QueueReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<16} {:<10} {:<24} {:>6}\n",
            "job_id", "state", "pipeline", "index"
        );
        for row in &self.rows {
            let state = match row.state {
                JobState::Pending => "pending",
                JobState::Running => "running",
                JobState::Done => "done",
                JobState::Failed => "failed",
            };
            out.push_str(&format!(
                "{:<16} {:<10} {:<24} {:>6}\n",
                row.job_id,
                state,
                row.pipeline_name,
                row.array_index
                    .map(|i| i.to_string())
                    .unwrap_or_else(|| "-".into())
            ));
        }
        out
    }
}

/// Queue view of a finished simulator run.
pub fn queue_from_sim(report: &SimReport) -> QueueReport {
    let rows = report
        .instances
        .iter()
        .map(|inst| QueueRow {
            job_id: format!("sim-{}", inst.index),
            state: match inst.final_state {
                FinalState::Done => JobState::Done,
                FinalState::Failed => JobState::Failed,
            },
            pipeline_name: report.pipeline_name.clone(),
            array_index: Some(inst.index as u32),
        })
        .collect();
    QueueReport {
        source: QueueSource::Sim,
        rows,
        warnings: Vec::new(),
    }
}

/// Parses scheduler queue text with whitespace-separated columns
/// `job_id job_name state`. Unknown states normalize to pending with a
/// warning; malformed lines are skipped with a warning.
pub fn queue_from_text(text: &str) -> QueueReport {
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with("JOBID") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() < 3 {
            warnings.push(format!("skipped malformed queue line: {trimmed:?}"));
            continue;
        }
        let job_id = fields[0].to_string();
        let pipeline_name = fields[1].to_string();
        let state = match parse_state(fields[2]) {
            Some(state) => state,
            None => {
                warnings.push(format!(
                    "unknown state {:?} for job {job_id}, treating as pending",
                    fields[2]
                ));
                JobState::Pending
            }
        };
        let array_index = job_id
            .split_once('_')
            .and_then(|(_, idx)| idx.parse::<u32>().ok());
        rows.push(QueueRow {
            job_id,
            state,
            pipeline_name,
            array_index,
        });
    }
    QueueReport {
        source: QueueSource::External,
        rows,
        warnings,
    }
}

fn parse_state(token: &str) -> Option<JobState> {
    match token.to_ascii_uppercase().as_str() {
        "PD" | "PENDING" | "CF" | "CONFIGURING" => Some(JobState::Pending),
        "R" | "RUNNING" | "CG" | "COMPLETING" => Some(JobState::Running),
        "CD" | "COMPLETED" => Some(JobState::Done),
        "F" | "FAILED" | "CA" | "CANCELLED" | "TO" | "TIMEOUT" | "NF" | "NODE_FAIL" | "OOM"
        | "OUT_OF_MEMORY" | "BF" | "BOOT_FAIL" => Some(JobState::Failed),
        _ => None,
    }
}
