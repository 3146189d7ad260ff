//! Declarative pipeline registry.
//!
//! Each pipeline is a data file, not a plugin: the pipelines managed here
//! differ only in container image, required inputs, and resources, so a
//! TOML spec per pipeline keeps the engine pipeline-agnostic. The registry
//! directory mirrors the container image archive; a spec binds to its image
//! by content digest, not by filename.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bids::{self, Suffix};
use crate::integrity;

/// Container image extensions the registry recognizes.
pub const IMAGE_EXTENSIONS: [&str; 3] = [".sif", ".simg", ".img"];

/// Placeholders every command template must contain.
pub const REQUIRED_PLACEHOLDERS: [&str; 2] = ["{inputs_dir}", "{outputs_dir}"];

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("duplicate pipeline name {0:?}")]
    DuplicatePipelineName(String),
    #[error("malformed spec {path}: {reason}")]
    MalformedSpec { path: PathBuf, reason: String },
    #[error("container image missing: {0}")]
    ImageMissing(PathBuf),
    #[error("container image digest mismatch for {path}: expected {expected}, found {actual}")]
    ImageDigestMismatch {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("registry directory unreadable: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Integrity(#[from] integrity::IntegrityError),
}

/// What a pipeline consumes: raw scans of one modality, or the completed
/// output of another pipeline (enabling chained pipelines).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    RawModality,
    Derivative,
}

/// One input requirement of a pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputSelector {
    pub kind: SelectorKind,
    /// Required when `kind = raw_modality`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub modality: Option<Suffix>,
    /// Required when `kind = derivative`.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pipeline_name: Option<String>,
    #[serde(default = "default_min_count")]
    pub min_count: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_count: Option<u32>,
}

fn default_min_count() -> u32 {
    1
}

impl InputSelector {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_count < 1 {
            return Err("min_count must be at least 1".into());
        }
        if let Some(max) = self.max_count {
            if max < self.min_count {
                return Err("max_count must be >= min_count".into());
            }
        }
        match self.kind {
            SelectorKind::RawModality => {
                if self.modality.is_none() {
                    return Err("raw_modality selector needs a modality".into());
                }
            }
            SelectorKind::Derivative => match &self.pipeline_name {
                None => return Err("derivative selector needs a pipeline_name".into()),
                Some(name) if !bids::is_valid_pipeline_name(name) => {
                    return Err(format!("bad derivative pipeline_name {name:?}"));
                }
                Some(_) => {}
            },
        }
        Ok(())
    }
}

/// Resources requested for one job instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub cpus: u32,
    pub memory_gb: f64,
    pub walltime_minutes: u32,
}

impl ResourceRequest {
    pub fn validate(&self) -> Result<(), String> {
        if self.cpus < 1 {
            return Err("cpus must be positive".into());
        }
        if self.memory_gb <= 0.0 {
            return Err("memory_gb must be positive".into());
        }
        if self.walltime_minutes < 1 {
            return Err("walltime_minutes must be positive".into());
        }
        Ok(())
    }
}

/// Declarative specification of one containerized pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub name: String,
    pub version: String,
    /// Image filename inside the image store.
    pub container_ref: PathBuf,
    /// SHA-256 of the image file, hex.
    pub container_digest: String,
    pub selectors: Vec<InputSelector>,
    pub resources: ResourceRequest,
    /// Shell command run inside the job; must contain `{inputs_dir}` and
    /// `{outputs_dir}`, may contain `{image}`.
    pub command_template: String,
}

impl PipelineSpec {
    pub fn validate(&self) -> Result<(), String> {
        if !bids::is_valid_pipeline_name(&self.name) {
            return Err(format!("bad pipeline name {:?}", self.name));
        }
        let ref_name = self.container_ref.to_string_lossy();
        if !IMAGE_EXTENSIONS.iter().any(|ext| ref_name.ends_with(ext)) {
            return Err(format!(
                "container_ref {ref_name:?} lacks a recognized image extension {IMAGE_EXTENSIONS:?}"
            ));
        }
        if self.container_digest.len() != 64
            || !self.container_digest.bytes().all(|b| b.is_ascii_hexdigit())
        {
            return Err("container_digest must be 64 hex characters".into());
        }
        if self.selectors.is_empty() {
            return Err("selectors must be nonempty".into());
        }
        for selector in &self.selectors {
            selector.validate()?;
        }
        self.resources.validate()?;
        for placeholder in REQUIRED_PLACEHOLDERS {
            if !self.command_template.contains(placeholder) {
                return Err(format!("command_template missing {placeholder}"));
            }
        }
        Ok(())
    }
}

/// Loads every `*.toml` spec in `dir`, sorted by pipeline name. The set of
/// specs is independent of file enumeration order; duplicate names are
/// rejected.
pub fn load_registry(dir: &Path) -> Result<Vec<PipelineSpec>, RegistryError> {
    let mut by_name: BTreeMap<String, PipelineSpec> = BTreeMap::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| RegistryError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|ext| ext == "toml"))
        .collect();
    entries.sort();
    for path in entries {
        let text = fs::read_to_string(&path).map_err(|e| RegistryError::Io {
            path: path.clone(),
            source: e,
        })?;
        let spec: PipelineSpec =
            toml::from_str(&text).map_err(|e| RegistryError::MalformedSpec {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        spec.validate()
            .map_err(|reason| RegistryError::MalformedSpec {
                path: path.clone(),
                reason,
            })?;
        if by_name.contains_key(&spec.name) {
            return Err(RegistryError::DuplicatePipelineName(spec.name));
        }
        by_name.insert(spec.name.clone(), spec);
    }
    Ok(by_name.into_values().collect())
}

/// Finds one pipeline by name.
pub fn find_pipeline<'a>(specs: &'a [PipelineSpec], name: &str) -> Option<&'a PipelineSpec> {
    specs.iter().find(|s| s.name == name)
}

/// Verifies that the spec's image exists in `image_store` and hashes to
/// `container_digest`. Reproducibility is bound to content, not filename.
pub fn validate_spec(spec: &PipelineSpec, image_store: &Path) -> Result<(), RegistryError> {
    let image_path = image_store.join(&spec.container_ref);
    if !image_path.is_file() {
        return Err(RegistryError::ImageMissing(image_path));
    }
    let actual = integrity::digest_file(&image_path)?;
    if actual != spec.container_digest {
        return Err(RegistryError::ImageDigestMismatch {
            path: image_path,
            expected: spec.container_digest.clone(),
            actual,
        });
    }
    Ok(())
}
