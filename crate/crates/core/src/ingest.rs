//! Scan classification and tiered link-farm ingest.
//!
//! Converted scans are classified into T1w/DWI/Other by user-editable rules
//! (protocol pattern, voxel resolution, matrix dimensions — first match
//! wins), then laid into the archive in two steps: the real bytes go into a
//! storage tier under a content-hash sharded layout, and BIDS-named symbolic
//! links are planted in the dataset tree. Planning is a pure dry run;
//! applying a plan is idempotent.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use regex::RegexBuilder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bids::{self, EntitySet, Extension, Suffix};
use crate::integrity;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("two scans map to the same target {0}")]
    DuplicateTarget(String),
    #[error("restricted tier {0} requires authorization")]
    RestrictedUnauthorized(PathBuf),
    #[error("tier root unwritable: {path}: {source}")]
    TierUnwritable {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("target {path} exists with different content")]
    CollisionWithDifferentContent { path: PathBuf },
    #[error("malformed rules file {path}: {reason}")]
    MalformedRules { path: PathBuf, reason: String },
    #[error(transparent)]
    Bids(#[from] bids::BidsError),
    #[error(transparent)]
    Integrity(#[from] integrity::IntegrityError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Modality label assigned by classification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    #[serde(rename = "DWI")]
    Dwi,
    Other,
}

impl Modality {
    pub fn suffix(&self) -> Option<Suffix> {
        match self {
            Modality::T1w => Some(Suffix::T1w),
            Modality::Dwi => Some(Suffix::Dwi),
            Modality::Other => None,
        }
    }
}

/// Metadata of one converted scan, as reported by the conversion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScanMeta {
    pub source_path: PathBuf,
    pub protocol_name: String,
    pub voxel_resolution_mm: [f64; 3],
    pub matrix_dims: [u32; 3],
    pub sidecar_present: bool,
}

impl RawScanMeta {
    pub fn validate(&self) -> Result<(), String> {
        if self.voxel_resolution_mm.iter().any(|r| *r <= 0.0) {
            return Err("voxel resolution components must be positive".into());
        }
        if self.matrix_dims.iter().any(|d| *d < 1) {
            return Err("matrix dimensions must be at least 1".into());
        }
        Ok(())
    }
}

/// One classification rule; first rule whose every present criterion
/// matches wins.
#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ClassificationRule {
    pub label: Modality,
    /// Case-insensitive regex patterns; plain text behaves as a substring
    /// match. A rule matches when any pattern matches the protocol name.
    #[serde(default)]
    pub protocol_patterns: Vec<String>,
    /// Per-axis inclusive minimum voxel size in millimeters.
    #[serde(default)]
    pub resolution_min_mm: Option<[f64; 3]>,
    /// Per-axis inclusive maximum voxel size in millimeters.
    #[serde(default)]
    pub resolution_max_mm: Option<[f64; 3]>,
    /// Per-axis inclusive minimum matrix dimensions.
    #[serde(default)]
    pub matrix_min: Option<[u32; 3]>,
}

impl ClassificationRule {
    pub fn validate(&self) -> Result<(), String> {
        if self.protocol_patterns.is_empty()
            && self.resolution_min_mm.is_none()
            && self.resolution_max_mm.is_none()
            && self.matrix_min.is_none()
        {
            return Err("rule has no criteria".into());
        }
        for pattern in &self.protocol_patterns {
            RegexBuilder::new(pattern)
                .case_insensitive(true)
                .build()
                .map_err(|e| format!("bad pattern {pattern:?}: {e}"))?;
        }
        Ok(())
    }

    fn matches(&self, meta: &RawScanMeta) -> bool {
        if !self.protocol_patterns.is_empty() {
            let any = self.protocol_patterns.iter().any(|pattern| {
                RegexBuilder::new(pattern)
                    .case_insensitive(true)
                    .build()
                    .map(|re| re.is_match(&meta.protocol_name))
                    .unwrap_or(false)
            });
            if !any {
                return false;
            }
        }
        if let Some(min) = self.resolution_min_mm {
            if (0..3).any(|i| meta.voxel_resolution_mm[i] < min[i]) {
                return false;
            }
        }
        if let Some(max) = self.resolution_max_mm {
            if (0..3).any(|i| meta.voxel_resolution_mm[i] > max[i]) {
                return false;
            }
        }
        if let Some(min) = self.matrix_min {
            if (0..3).any(|i| meta.matrix_dims[i] < min[i]) {
                return false;
            }
        }
        true
    }
}

/// Applies ordered rules to one scan; falls through to `Other`.
pub fn classify_scan(meta: &RawScanMeta, rules: &[ClassificationRule]) -> Modality {
    rules
        .iter()
        .find(|rule| rule.matches(meta))
        .map(|rule| rule.label)
        .unwrap_or(Modality::Other)
}

#[derive(Deserialize)]
struct RulesFile {
    #[serde(default, rename = "rule")]
    rules: Vec<ClassificationRule>,
}

/// Loads classification rules from a TOML file with one `[[rule]]` block per
/// rule (fields as in [`ClassificationRule`]).
pub fn load_rules(path: &Path) -> Result<Vec<ClassificationRule>, IngestError> {
    let text = fs::read_to_string(path).map_err(|e| IngestError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let parsed: RulesFile = toml::from_str(&text).map_err(|e| IngestError::MalformedRules {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if parsed.rules.is_empty() {
        return Err(IngestError::MalformedRules {
            path: path.to_path_buf(),
            reason: "no [[rule]] blocks".into(),
        });
    }
    for rule in &parsed.rules {
        rule.validate().map_err(|reason| IngestError::MalformedRules {
            path: path.to_path_buf(),
            reason,
        })?;
    }
    Ok(parsed.rules)
}

/// Which storage tier receives the real bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TierKind {
    General,
    Restricted,
}

/// A storage tier: the general server or the compliance-restricted one.
/// Access to the restricted tier is modeled by the `authorized` flag; the
/// real controls are organizational.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageTier {
    pub name: TierKind,
    pub root: PathBuf,
    #[serde(default = "default_true")]
    pub authorized: bool,
}

fn default_true() -> bool {
    true
}

/// One planned placement: copy `source` to `real_file` inside the tier, then
/// link `link_path` (dataset-relative) to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub source: PathBuf,
    pub real_file: PathBuf,
    pub link_path: String,
    pub digest: String,
}

/// Dry-run ingest plan; applying it is a separate, idempotent step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkFarmPlan {
    pub dataset_root: PathBuf,
    pub tier: StorageTier,
    pub entries: Vec<PlanEntry>,
}

/// A scan ready for placement: metadata, assigned label, and the target
/// identity of its primary image.
pub type ClassifiedScan = (RawScanMeta, Modality, EntitySet);

/// Plans the placement of classified scans into `tier` + `dataset_root`.
///
/// Real files land under `<tier.root>/<dataset>/<digest[0:2]>/<digest>`;
/// links land at BIDS-compliant paths under the dataset root. Each scan
/// expands to its file family: the image plus `.json` sidecar when present,
/// plus `.bval`/`.bvec` for DWI. The plan is side-effect-free.
pub fn plan_ingest(
    scans: &[ClassifiedScan],
    tier: &StorageTier,
    dataset_root: &Path,
) -> Result<LinkFarmPlan, IngestError> {
    if tier.name == TierKind::Restricted && !tier.authorized {
        return Err(IngestError::RestrictedUnauthorized(tier.root.clone()));
    }
    let dataset_name = dataset_root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());

    let mut entries = Vec::new();
    let mut seen_links = BTreeSet::new();
    let mut seen_real = BTreeMap::new();
    for (meta, label, target) in scans {
        let suffix = match label.suffix() {
            Some(s) => s,
            None => continue, // Other: not organized into the archive
        };
        meta.validate()
            .map_err(|reason| IngestError::MalformedRules {
                path: meta.source_path.clone(),
                reason,
            })?;
        let mut family = vec![Extension::NiiGz];
        if meta.sidecar_present {
            family.push(Extension::Json);
        }
        if suffix == Suffix::Dwi {
            family.push(Extension::Bval);
            family.push(Extension::Bvec);
        }
        for extension in family {
            let entities = EntitySet {
                suffix,
                extension,
                ..target.clone()
            };
            entities.validate()?;
            let source = sibling_with_extension(&meta.source_path, extension);
            let digest = integrity::digest_file(&source)?;
            let link_path = entities.raw_relative_path();
            if !seen_links.insert(link_path.clone()) {
                return Err(IngestError::DuplicateTarget(link_path));
            }
            let real_file = tier
                .root
                .join(&dataset_name)
                .join(&digest[..2])
                .join(&digest);
            // The content-addressed layout stores each real file once; two
            // sources with identical bytes would need two links to one file,
            // which the plan shape forbids.
            if let Some(previous) = seen_real.insert(real_file.clone(), link_path.clone()) {
                return Err(IngestError::DuplicateTarget(format!(
                    "{link_path} and {previous} share content {digest}"
                )));
            }
            entries.push(PlanEntry {
                source,
                real_file,
                link_path,
                digest,
            });
        }
    }
    Ok(LinkFarmPlan {
        dataset_root: dataset_root.to_path_buf(),
        tier: tier.clone(),
        entries,
    })
}

/// Replaces the known BIDS extension of `path` (or appends when the source
/// has none) to locate sibling family files produced by conversion.
fn sibling_with_extension(path: &Path, extension: Extension) -> PathBuf {
    let name = path.to_string_lossy();
    for ext in Extension::ALL {
        if let Some(stem) = name.strip_suffix(ext.as_str()) {
            return PathBuf::from(format!("{stem}{extension}"));
        }
    }
    PathBuf::from(format!("{name}{extension}"))
}

/// What happened to one plan entry during apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestAction {
    Created,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub link_path: String,
    pub real_path: PathBuf,
    pub action: IngestAction,
}

/// Apply report: per-entry outcomes plus counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub outcomes: Vec<IngestOutcome>,
    pub files_created: usize,
    pub links_created: usize,
    pub skipped: usize,
}

impl IngestReport {
    /// CSV with columns `link_path,real_path,action`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("link_path,real_path,action\n");
        for o in &self.outcomes {
            let action = match o.action {
                IngestAction::Created => "created",
                IngestAction::Skipped => "skipped",
            };
            out.push_str(&format!(
                "{},{},{}\n",
                o.link_path,
                o.real_path.display(),
                action
            ));
        }
        out
    }
}

/// Executes a plan: copies each source into the tier (verified) and plants
/// the symbolic link. Re-applying an applied plan reports all-skipped and
/// changes nothing; a target holding different content is an error.
pub fn apply_ingest(plan: &LinkFarmPlan) -> Result<IngestReport, IngestError> {
    if plan.tier.name == TierKind::Restricted && !plan.tier.authorized {
        return Err(IngestError::RestrictedUnauthorized(plan.tier.root.clone()));
    }
    fs::create_dir_all(&plan.tier.root).map_err(|e| IngestError::TierUnwritable {
        path: plan.tier.root.clone(),
        source: e,
    })?;

    let mut report = IngestReport {
        outcomes: Vec::new(),
        files_created: 0,
        links_created: 0,
        skipped: 0,
    };
    for entry in &plan.entries {
        let mut created = false;
        if entry.real_file.exists() {
            let existing = integrity::digest_file(&entry.real_file)?;
            if existing != entry.digest {
                return Err(IngestError::CollisionWithDifferentContent {
                    path: entry.real_file.clone(),
                });
            }
        } else {
            if let Some(parent) = entry.real_file.parent() {
                fs::create_dir_all(parent).map_err(|e| IngestError::TierUnwritable {
                    path: parent.to_path_buf(),
                    source: e,
                })?;
            }
            let receipt = integrity::transfer_verified(&entry.source, &entry.real_file)?;
            if receipt.digest != entry.digest {
                // Source changed between planning and applying.
                let _ = fs::remove_file(&entry.real_file);
                return Err(IngestError::CollisionWithDifferentContent {
                    path: entry.source.clone(),
                });
            }
            report.files_created += 1;
            created = true;
        }

        let link_abs = plan.dataset_root.join(&entry.link_path);
        match fs::symlink_metadata(&link_abs) {
            Ok(meta) if meta.file_type().is_symlink() => {
                let target = fs::read_link(&link_abs).map_err(|e| IngestError::Io {
                    path: link_abs.clone(),
                    source: e,
                })?;
                if target != entry.real_file {
                    return Err(IngestError::CollisionWithDifferentContent { path: link_abs });
                }
            }
            Ok(_) => {
                return Err(IngestError::CollisionWithDifferentContent { path: link_abs });
            }
            Err(_) => {
                if let Some(parent) = link_abs.parent() {
                    fs::create_dir_all(parent).map_err(|e| IngestError::Io {
                        path: parent.to_path_buf(),
                        source: e,
                    })?;
                }
                #[cfg(unix)]
                std::os::unix::fs::symlink(&entry.real_file, &link_abs).map_err(|e| {
                    IngestError::Io {
                        path: link_abs.clone(),
                        source: e,
                    }
                })?;
                #[cfg(not(unix))]
                return Err(IngestError::Io {
                    path: link_abs.clone(),
                    source: io::Error::new(io::ErrorKind::Unsupported, "symlinks require unix"),
                });
                report.links_created += 1;
                created = true;
            }
        }

        let action = if created {
            IngestAction::Created
        } else {
            report.skipped += 1;
            IngestAction::Skipped
        };
        report.outcomes.push(IngestOutcome {
            link_path: entry.link_path.clone(),
            real_path: entry.real_file.clone(),
            action,
        });
    }
    Ok(report)
}
