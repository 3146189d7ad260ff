//! Eligibility querying: what is available to run but has not been run.
//!
//! A session is complete only when a valid provenance record seals its
//! derivative directory and every listed output re-verifies; outputs
//! without provenance are reported as partial and never silently re-run.
//! Every ineligible session carries a machine-stable cause code plus human
//! text, written to the accompanying CSV.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bids::{self, DatasetIndex, Extension, ScanRecord, Suffix};
use crate::integrity::CompletionState;
use crate::registry::{InputSelector, PipelineSpec, SelectorKind};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("output unwritable: {path}: {source}")]
    OutUnwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Why a session cannot run a pipeline right now.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "detail")]
pub enum IneligibilityCause {
    #[serde(rename = "MISSING_RAW_INPUT")]
    MissingRawInput(Suffix),
    #[serde(rename = "MISSING_DERIVATIVE_INPUT")]
    MissingDerivativeInput(String),
    #[serde(rename = "ALREADY_COMPLETE")]
    AlreadyComplete,
    #[serde(rename = "PARTIAL_OUTPUT_PRESENT")]
    PartialOutputPresent,
}

impl IneligibilityCause {
    /// Machine-stable cause code, e.g. `MISSING_RAW_INPUT(T1w)`.
    pub fn code(&self) -> String {
        match self {
            IneligibilityCause::MissingRawInput(m) => format!("MISSING_RAW_INPUT({m})"),
            IneligibilityCause::MissingDerivativeInput(p) => {
                format!("MISSING_DERIVATIVE_INPUT({p})")
            }
            IneligibilityCause::AlreadyComplete => "ALREADY_COMPLETE".to_string(),
            IneligibilityCause::PartialOutputPresent => "PARTIAL_OUTPUT_PRESENT".to_string(),
        }
    }

    /// Human-readable explanation that accompanies the code.
    pub fn text(&self) -> String {
        match self {
            IneligibilityCause::MissingRawInput(m) => {
                format!("no available {m} image in the scanning session")
            }
            IneligibilityCause::MissingDerivativeInput(p) => {
                format!("required derivative from pipeline {p} is not complete")
            }
            IneligibilityCause::AlreadyComplete => {
                "outputs already present with valid provenance".to_string()
            }
            IneligibilityCause::PartialOutputPresent => {
                "output directory contains files without a valid provenance record".to_string()
            }
        }
    }
}

/// One session that cannot run, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IneligibilityRecord {
    pub dataset_name: String,
    pub subject: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub session: Option<String>,
    pub pipeline_name: String,
    pub cause: IneligibilityCause,
}

/// One session to run: its resolved inputs and output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkItem {
    pub pipeline_name: String,
    pub dataset_name: String,
    pub subject: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub session: Option<String>,
    /// Dataset-relative input paths, deterministically ordered.
    pub resolved_inputs: Vec<String>,
    /// Dataset-relative derivative directory for this run.
    pub output_dir: String,
}

/// Everything one query produced: runnable items plus explained exclusions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub created_at: String,
    pub pipeline_name: String,
    pub dataset_name: String,
    pub items: Vec<WorkItem>,
    pub ineligible: Vec<IneligibilityRecord>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Outcome of evaluating one session against one pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionOutcome {
    Run(WorkItem),
    Skip(IneligibilityRecord),
}

/// Evaluates one session: completion state first, then each input selector
/// in order. The first failing selector decides the reported cause, keeping
/// one row per session in the CSV.
pub fn evaluate_session(
    index: &DatasetIndex,
    spec: &PipelineSpec,
    subject: &str,
    session: Option<&str>,
) -> SessionOutcome {
    let skip = |cause: IneligibilityCause| {
        SessionOutcome::Skip(IneligibilityRecord {
            dataset_name: index.dataset_name.clone(),
            subject: subject.to_string(),
            session: session.map(str::to_string),
            pipeline_name: spec.name.clone(),
            cause,
        })
    };

    match index.completion(&spec.name, subject, session) {
        CompletionState::Complete => return skip(IneligibilityCause::AlreadyComplete),
        CompletionState::Partial => return skip(IneligibilityCause::PartialOutputPresent),
        CompletionState::Absent => {}
    }

    let scans = index.session_scans(subject, session).unwrap_or(&[]);
    let mut resolved_inputs = Vec::new();
    for selector in &spec.selectors {
        match resolve_selector(index, selector, scans, subject, session) {
            Ok(mut inputs) => resolved_inputs.append(&mut inputs),
            Err(cause) => return skip(cause),
        }
    }

    let output_dir = bids::derivative_dir(&spec.name, subject, session)
        .expect("spec name validated at load");
    SessionOutcome::Run(WorkItem {
        pipeline_name: spec.name.clone(),
        dataset_name: index.dataset_name.clone(),
        subject: subject.to_string(),
        session: session.map(str::to_string),
        resolved_inputs,
        output_dir,
    })
}

/// Resolves one selector to concrete input paths or a cause for failure.
///
/// Raw images are ordered by run index ascending (absent first) then
/// filename; `max_count` truncates after ordering. Each selected image
/// brings its companion files (sidecar JSON, bval/bvec) along.
fn resolve_selector(
    index: &DatasetIndex,
    selector: &InputSelector,
    scans: &[ScanRecord],
    subject: &str,
    session: Option<&str>,
) -> Result<Vec<String>, IneligibilityCause> {
    match selector.kind {
        SelectorKind::RawModality => {
            let modality = selector.modality.expect("validated at load");
            let mut images: Vec<&ScanRecord> = scans
                .iter()
                .filter(|r| {
                    r.entities.suffix == modality && r.entities.extension == Extension::NiiGz
                })
                .collect();
            images.sort_by(|a, b| {
                (a.entities.run, &a.relative_path).cmp(&(b.entities.run, &b.relative_path))
            });
            if (images.len() as u32) < selector.min_count {
                return Err(IneligibilityCause::MissingRawInput(modality));
            }
            if let Some(max) = selector.max_count {
                images.truncate(max as usize);
            }
            let mut inputs = Vec::new();
            for image in images {
                inputs.push(image.relative_path.clone());
                for companion in companion_records(scans, image) {
                    inputs.push(companion);
                }
            }
            Ok(inputs)
        }
        SelectorKind::Derivative => {
            let upstream = selector.pipeline_name.as_deref().expect("validated at load");
            if selector.min_count > 1
                || index.completion(upstream, subject, session) != CompletionState::Complete
            {
                return Err(IneligibilityCause::MissingDerivativeInput(
                    upstream.to_string(),
                ));
            }
            let dir = bids::derivative_dir(upstream, subject, session)
                .map_err(|_| IneligibilityCause::MissingDerivativeInput(upstream.to_string()))?;
            Ok(vec![dir])
        }
    }
}

/// Non-image files sharing the image's stem: sidecar JSON, bval/bvec.
fn companion_records(scans: &[ScanRecord], image: &ScanRecord) -> Vec<String> {
    let stem = image
        .relative_path
        .strip_suffix(".nii.gz")
        .expect("image extension");
    let mut companions: Vec<String> = scans
        .iter()
        .filter(|r| r.entities.extension != Extension::NiiGz)
        .filter(|r| {
            Extension::ALL
                .iter()
                .any(|ext| r.relative_path == format!("{stem}{}", ext.as_str()))
        })
        .map(|r| r.relative_path.clone())
        .collect();
    companions.sort();
    companions
}

/// Evaluates every session in the index and partitions the results.
/// Ordering is deterministic: items and ineligible rows sort by
/// (subject, session).
pub fn build_manifest(index: &DatasetIndex, spec: &PipelineSpec) -> RunManifest {
    let mut items = Vec::new();
    let mut ineligible = Vec::new();
    for (subject, session) in index.sessions.keys() {
        match evaluate_session(index, spec, subject, session.as_deref()) {
            SessionOutcome::Run(item) => items.push(item),
            SessionOutcome::Skip(record) => ineligible.push(record),
        }
    }
    RunManifest {
        created_at: crate::integrity::utc_now_string(),
        pipeline_name: spec.name.clone(),
        dataset_name: index.dataset_name.clone(),
        items,
        ineligible,
    }
}

/// CSV header of the ineligibility report.
pub const INELIGIBILITY_CSV_HEADER: &str = "dataset,subject,session,pipeline,cause_code,cause_text";

/// Writes the ineligibility CSV: UTF-8, LF endings, RFC-4180 quoting, one
/// row per ineligible session, header always present.
pub fn write_ineligibility_csv(manifest: &RunManifest, out: &Path) -> Result<PathBuf, QueryError> {
    let unwritable = |e: std::io::Error| QueryError::OutUnwritable {
        path: out.to_path_buf(),
        source: e,
    };
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent).map_err(unwritable)?;
    }
    let file = std::fs::File::create(out).map_err(unwritable)?;
    let mut writer = csv::WriterBuilder::new().from_writer(file);
    writer
        .write_record(INELIGIBILITY_CSV_HEADER.split(','))
        .map_err(|e| unwritable(std::io::Error::other(e)))?;
    for record in &manifest.ineligible {
        writer
            .write_record([
                record.dataset_name.as_str(),
                record.subject.as_str(),
                record.session.as_deref().unwrap_or(""),
                record.pipeline_name.as_str(),
                record.cause.code().as_str(),
                record.cause.text().as_str(),
            ])
            .map_err(|e| unwritable(std::io::Error::other(e)))?;
    }
    writer
        .into_inner()
        .map_err(|e| unwritable(std::io::Error::other(e)))?
        .flush()
        .map_err(unwritable)?;
    Ok(out.to_path_buf())
}
