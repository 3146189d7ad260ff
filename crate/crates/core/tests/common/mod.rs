//! Shared fixture builders for integration tests.
#![allow(dead_code)] // each test target uses a different subset

use std::fs;
use std::path::{Path, PathBuf};

use bidsbatch_core::bids::Suffix;
use bidsbatch_core::integrity;
use bidsbatch_core::registry::{InputSelector, PipelineSpec, SelectorKind};

/// Files written per session by [`make_archive`]: T1w (nii.gz + json) and a
/// DWI set (nii.gz + json + bval + bvec).
pub const FILES_PER_SESSION: usize = 6;

/// Builds a dataset fixture with `subjects x sessions` scanning sessions.
/// Sessions listed in `missing_t1w` get no T1w files. Every file's content
/// embeds its own path so content digests are unique.
pub fn make_archive(
    archive_root: &Path,
    dataset: &str,
    subjects: usize,
    sessions: usize,
    missing_t1w: &[(usize, usize)],
) -> PathBuf {
    let dataset_root = archive_root.join(dataset);
    for s in 1..=subjects {
        for ses in 1..=sessions {
            let subject = format!("{s:02}");
            let session = format!("{ses:02}");
            let base = dataset_root
                .join(format!("sub-{subject}"))
                .join(format!("ses-{session}"));
            let write = |dir: &str, name: String, body: &str| {
                let path = base.join(dir).join(&name);
                fs::create_dir_all(path.parent().unwrap()).unwrap();
                fs::write(&path, format!("{body}:{}", path.display())).unwrap();
            };
            if !missing_t1w.contains(&(s, ses)) {
                write(
                    "anat",
                    format!("sub-{subject}_ses-{session}_T1w.nii.gz"),
                    "t1-voxels",
                );
                let sidecar = base.join("anat").join(format!(
                    "sub-{subject}_ses-{session}_T1w.json"
                ));
                fs::create_dir_all(sidecar.parent().unwrap()).unwrap();
                fs::write(
                    &sidecar,
                    format!(r#"{{"ProtocolName":"MPRAGE","Series":"{subject}-{session}"}}"#),
                )
                .unwrap();
            }
            write(
                "dwi",
                format!("sub-{subject}_ses-{session}_dwi.nii.gz"),
                "dwi-voxels",
            );
            let dwi_sidecar = base
                .join("dwi")
                .join(format!("sub-{subject}_ses-{session}_dwi.json"));
            fs::write(
                &dwi_sidecar,
                format!(r#"{{"ProtocolName":"ep2d_diff","Series":"{subject}-{session}"}}"#),
            )
            .unwrap();
            write(
                "dwi",
                format!("sub-{subject}_ses-{session}_dwi.bval"),
                "bvals",
            );
            write(
                "dwi",
                format!("sub-{subject}_ses-{session}_dwi.bvec"),
                "bvecs",
            );
        }
    }
    dataset_root
}

/// Writes a stub pipeline spec + matching image into `registry_dir` /
/// `image_store` and returns the spec.
pub fn make_pipeline(
    registry_dir: &Path,
    image_store: &Path,
    name: &str,
    modality: Suffix,
) -> PipelineSpec {
    fs::create_dir_all(registry_dir).unwrap();
    fs::create_dir_all(image_store).unwrap();
    let image_name = format!("{name}_v1.sif");
    let image_path = image_store.join(&image_name);
    fs::write(&image_path, format!("stub-image-{name}")).unwrap();
    let digest = integrity::digest_file(&image_path).unwrap();

    let spec = PipelineSpec {
        name: name.to_string(),
        version: "1.0.0".to_string(),
        container_ref: PathBuf::from(&image_name),
        container_digest: digest.clone(),
        selectors: vec![InputSelector {
            kind: SelectorKind::RawModality,
            modality: Some(modality),
            pipeline_name: None,
            min_count: 1,
            max_count: None,
        }],
        resources: bidsbatch_core::registry::ResourceRequest {
            cpus: 2,
            memory_gb: 4.0,
            walltime_minutes: 90,
        },
        command_template: "singularity run {image} {inputs_dir} {outputs_dir}".to_string(),
    };
    let modality_str = match modality {
        Suffix::T1w => "T1w",
        Suffix::Dwi => "dwi",
    };
    let toml_text = format!(
        r#"name = "{name}"
version = "1.0.0"
container_ref = "{image_name}"
container_digest = "{digest}"
command_template = "singularity run {{image}} {{inputs_dir}} {{outputs_dir}}"

[resources]
cpus = 2
memory_gb = 4.0
walltime_minutes = 90

[[selectors]]
kind = "raw_modality"
modality = "{modality_str}"
min_count = 1
"#
    );
    fs::write(registry_dir.join(format!("{name}.toml")), toml_text).unwrap();
    spec
}

/// Digest of a whole tree: relative paths, link targets, and file contents.
pub fn tree_digest(root: &Path) -> String {
    use sha2::{Digest, Sha256};
    let mut paths = Vec::new();
    collect(root, root, &mut paths);
    paths.sort();
    let mut hasher = Sha256::new();
    for (rel, kind, payload) in paths {
        hasher.update(rel.as_bytes());
        hasher.update([0]);
        hasher.update(kind.as_bytes());
        hasher.update([0]);
        hasher.update(&payload);
        hasher.update([0xFF]);
    }
    hex::encode(hasher.finalize())
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<(String, String, Vec<u8>)>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.filter_map(Result::ok) {
        let path = entry.path();
        let rel = path
            .strip_prefix(root)
            .unwrap()
            .to_string_lossy()
            .into_owned();
        let meta = fs::symlink_metadata(&path).unwrap();
        if meta.file_type().is_symlink() {
            let target = fs::read_link(&path).unwrap();
            out.push((
                rel,
                "link".into(),
                target.to_string_lossy().into_owned().into_bytes(),
            ));
        } else if meta.is_dir() {
            out.push((rel.clone(), "dir".into(), Vec::new()));
            collect(root, &path, out);
        } else {
            out.push((rel, "file".into(), fs::read(&path).unwrap()));
        }
    }
}

/// Path to the compiled `bidsbatch` binary for subprocess tests.
pub fn tool_bin() -> &'static str {
    env!("CARGO_BIN_EXE_bidsbatch")
}
