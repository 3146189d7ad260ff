//! Job script generation: per-instance scripts, the SLURM array script, and
//! the local burst-mode runner.
//!
//! Every instance script walks the same lifecycle: make a private scratch
//! dir, stage inputs in with digest verification, run the container, stage
//! outputs back with verification, seal the run with a provenance record,
//! and clean up. Each phase exits with its own code so scheduler accounting
//! alone can triage failures:
//!
//! - 10 stage-in, 20 container, 30 stage-out, 40 provenance.
//!
//! Generation is pure text assembly — byte-identical for the same
//! (manifest, spec, submit) — and executed instances touch disjoint scratch
//! and output directories, which is what makes array parallelism safe.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::query::{RunManifest, WorkItem};
use crate::registry::{PipelineSpec, ResourceRequest};

pub const EXIT_STAGE_IN: i32 = 10;
pub const EXIT_CONTAINER: i32 = 20;
pub const EXIT_STAGE_OUT: i32 = 30;
pub const EXIT_PROVENANCE: i32 = 40;

/// Environment variable pointing instance scripts at this tool's binary.
pub const TOOL_BIN_ENV: &str = "BIDSBATCH_BIN";
/// Environment override replacing the container invocation with a stub.
pub const CONTAINER_CMD_ENV: &str = "SIMSCHED_CONTAINER_CMD";
/// Environment override for the local runner's parallelism bound.
pub const MAX_PARALLEL_ENV: &str = "BIDSBATCH_MAX_PARALLEL";

#[derive(Debug, Error)]
pub enum ScriptgenError {
    #[error("command template error: {0}")]
    TemplateError(String),
    #[error("manifest has no runnable items")]
    EmptyManifest,
    #[error("submit spec invalid: {0}")]
    BadSubmitSpec(String),
    #[error("unwritable: {path}: {source}")]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// User-provided submission parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitSpec {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub partition: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub account: Option<String>,
    /// Maximum concurrent array tasks (`%N` in the array directive).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub array_throttle: Option<u32>,
    /// Absolute scratch root on the compute node.
    pub scratch_root: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub notify_email: Option<String>,
}

impl SubmitSpec {
    pub fn validate(&self) -> Result<(), ScriptgenError> {
        if !self.scratch_root.is_absolute() {
            return Err(ScriptgenError::BadSubmitSpec(format!(
                "scratch_root {} must be absolute",
                self.scratch_root.display()
            )));
        }
        if self.array_throttle == Some(0) {
            return Err(ScriptgenError::BadSubmitSpec(
                "array_throttle must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Absolute locations the generated scripts are allowed to reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptContext {
    pub dataset_root: PathBuf,
    pub image_store: PathBuf,
}

/// Everything one `plan` invocation emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedBundle {
    pub scripts_dir: PathBuf,
    pub instance_scripts: Vec<PathBuf>,
    pub array_script: PathBuf,
    pub local_runner: PathBuf,
    pub manifest_ref: PathBuf,
}

/// Name of the bundle metadata file written next to the manifest.
pub const BUNDLE_FILENAME: &str = "bundle.json";

impl GeneratedBundle {
    pub fn save(&self, out_dir: &Path) -> Result<PathBuf, ScriptgenError> {
        let path = out_dir.join(BUNDLE_FILENAME);
        let text = serde_json::to_string_pretty(self).expect("bundle serializes");
        fs::write(&path, text).map_err(|e| ScriptgenError::Unwritable {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }

    pub fn load(out_dir: &Path) -> Result<Self, ScriptgenError> {
        let path = out_dir.join(BUNDLE_FILENAME);
        let text = fs::read_to_string(&path).map_err(|e| ScriptgenError::Unwritable {
            path: path.clone(),
            source: e,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| ScriptgenError::TemplateError(format!("bad bundle file: {e}")))
    }
}

/// Single-quotes a string for POSIX sh.
fn sh_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

/// Short content tag over the manifest's items, used to name scratch
/// directories collision-free across re-runs. The manifest timestamp is
/// deliberately excluded so regeneration is byte-stable.
pub fn manifest_tag(manifest: &RunManifest) -> String {
    let items = serde_json::to_string(&manifest.items).expect("items serialize");
    let digest = Sha256::digest(items.as_bytes());
    hex::encode(&digest[..4])
}

/// Substitutes `{inputs_dir}`, `{outputs_dir}`, and `{image}` in a command
/// template with the corresponding shell variables. Unknown or unresolved
/// placeholders are errors.
fn render_template(template: &str) -> Result<String, ScriptgenError> {
    for required in crate::registry::REQUIRED_PLACEHOLDERS {
        if !template.contains(required) {
            return Err(ScriptgenError::TemplateError(format!(
                "missing placeholder {required}"
            )));
        }
    }
    let rendered = template
        .replace("{inputs_dir}", "\"$INPUTS_DIR\"")
        .replace("{outputs_dir}", "\"$OUTPUTS_DIR\"")
        .replace("{image}", "\"$IMAGE\"");
    if let (Some(start), true) = (rendered.find('{'), rendered.contains('}')) {
        let rest = &rendered[start..];
        if let Some(end) = rest.find('}') {
            let token = &rest[..=end];
            if token.len() > 1 && token[1..token.len() - 1]
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b == b'_')
            {
                return Err(ScriptgenError::TemplateError(format!(
                    "unresolved placeholder {token}"
                )));
            }
        }
    }
    Ok(rendered)
}

/// Scratch-side name for one staged input: files keep their basename, while
/// directory inputs flatten their relative path to stay collision-free.
fn staged_name(input: &str, is_dir_input: bool) -> String {
    if is_dir_input {
        input.replace('/', "_")
    } else {
        input.rsplit('/').next().unwrap_or(input).to_string()
    }
}

fn scratch_dir_name(item: &WorkItem, tag: &str) -> String {
    let mut name = format!("{}_sub-{}", item.pipeline_name, item.subject);
    if let Some(ses) = &item.session {
        name.push_str(&format!("_ses-{ses}"));
    }
    name.push_str(&format!("_{tag}"));
    name
}

/// Emits the POSIX sh script that runs one work item end to end.
///
/// Step order: scratch setup, verified stage-in of every resolved input,
/// container execution (template command, or the `SIMSCHED_CONTAINER_CMD`
/// override when set), verified stage-out, provenance record, scratch
/// cleanup. Any integrity mismatch terminates the script with the phase's
/// exit code and no provenance is written.
pub fn generate_instance_script(
    item: &WorkItem,
    spec: &PipelineSpec,
    submit: &SubmitSpec,
    ctx: &ScriptContext,
    index: usize,
    tag: &str,
) -> Result<String, ScriptgenError> {
    submit.validate()?;
    let command = render_template(&spec.command_template)?;
    let dataset_root = ctx.dataset_root.to_string_lossy();
    let image = ctx
        .image_store
        .join(&spec.container_ref)
        .to_string_lossy()
        .into_owned();
    let scratch_root = submit.scratch_root.to_string_lossy();
    let session_comment = item
        .session
        .as_deref()
        .map(|s| format!(" ses-{s}"))
        .unwrap_or_default();

    let mut script = String::new();
    script.push_str("#!/bin/sh\n");
    script.push_str(&format!(
        "# instance {index}: {} sub-{}{session_comment}\n",
        item.pipeline_name, item.subject
    ));
    script.push_str("set -u\n\n");
    script.push_str(&format!("DATASET_ROOT={}\n", sh_quote(&dataset_root)));
    script.push_str(&format!("IMAGE={}\n", sh_quote(&image)));
    script.push_str(&format!("SCRATCH_ROOT={}\n", sh_quote(&scratch_root)));
    script.push_str(&format!(
        "SCRATCH=\"$SCRATCH_ROOT/{}\"\n",
        scratch_dir_name(item, tag)
    ));
    script.push_str("INPUTS_DIR=\"$SCRATCH/inputs\"\n");
    script.push_str("OUTPUTS_DIR=\"$SCRATCH/outputs\"\n");
    script.push_str(&format!(
        "OUTPUT_DIR=\"$DATASET_ROOT/{}\"\n",
        item.output_dir
    ));
    script.push_str("RECEIPTS=\"$SCRATCH/stage_in_receipts.jsonl\"\n");
    script.push_str(&format!("TOOL=\"${{{TOOL_BIN_ENV}:-bidsbatch}}\"\n\n"));
    script.push_str("fail() {\n    rm -rf \"$SCRATCH\"\n    exit \"$1\"\n}\n\n");
    script.push_str("STARTED_AT=\"$(date -u +%Y-%m-%dT%H:%M:%SZ)\"\n");
    script.push_str(&format!(
        "mkdir -p \"$INPUTS_DIR\" \"$OUTPUTS_DIR\" || exit {EXIT_STAGE_IN}\n\n"
    ));

    script.push_str("# stage-in: verified copies from archive storage to scratch\n");
    for input in &item.resolved_inputs {
        let is_dir_input = input.starts_with("derivatives/");
        let dst = staged_name(input, is_dir_input);
        script.push_str(&format!(
            "\"$TOOL\" stage --phase in --src \"$DATASET_ROOT/{input}\" --dst \"$INPUTS_DIR/{dst}\" --receipt \"$RECEIPTS\" || fail {EXIT_STAGE_IN}\n"
        ));
    }

    script.push_str("\n# container execution\n");
    script.push_str(&format!(
        "if [ -n \"${{{CONTAINER_CMD_ENV}:-}}\" ]; then\n"
    ));
    script.push_str(&format!(
        "    \"${CONTAINER_CMD_ENV}\" \"$INPUTS_DIR\" \"$OUTPUTS_DIR\" || fail {EXIT_CONTAINER}\n"
    ));
    script.push_str("else\n");
    script.push_str(&format!("    {command} || fail {EXIT_CONTAINER}\n"));
    script.push_str("fi\n\n");

    script.push_str("# stage-out: verified copies back to archive storage\n");
    script.push_str(&format!("mkdir -p \"$OUTPUT_DIR\" || fail {EXIT_STAGE_OUT}\n"));
    script.push_str(&format!(
        "\"$TOOL\" stage --phase out --src \"$OUTPUTS_DIR\" --dst \"$OUTPUT_DIR\" || fail {EXIT_STAGE_OUT}\n\n"
    ));

    script.push_str("# provenance record sealing the run\n");
    script.push_str(&format!(
        "\"$TOOL\" provenance \\\n    --pipeline {} \\\n    --pipeline-version {} \\\n    --container-digest {} \\\n    --output-dir \"$OUTPUT_DIR\" \\\n    --inputs-receipt \"$RECEIPTS\" \\\n    --archive-root \"$DATASET_ROOT\" \\\n    --started-at \"$STARTED_AT\" || fail {EXIT_PROVENANCE}\n\n",
        sh_quote(&item.pipeline_name),
        sh_quote(&spec.version),
        sh_quote(&spec.container_digest),
    ));
    script.push_str("rm -rf \"$SCRATCH\"\nexit 0\n");
    Ok(script)
}

/// Formats walltime minutes as SLURM `D-HH:MM:SS`.
pub fn format_walltime(minutes: u32) -> String {
    let days = minutes / (24 * 60);
    let rem = minutes % (24 * 60);
    format!("{days}-{:02}:{:02}:00", rem / 60, rem % 60)
}

/// Memory directive value: integral gigabytes, rounded up.
pub fn format_mem_gb(memory_gb: f64) -> String {
    format!("{}G", memory_gb.ceil() as u64)
}

fn array_range(n_items: usize, throttle: Option<u32>) -> String {
    let mut range = if n_items == 1 {
        "0".to_string()
    } else {
        format!("0-{}", n_items - 1)
    };
    if let Some(t) = throttle {
        range.push_str(&format!("%{t}"));
    }
    range
}

/// Emits the SLURM job-array submission script dispatching the instance
/// scripts. The `#SBATCH` directive lines are a stable bit-exact contract.
pub fn generate_array_script(
    n_items: usize,
    resources: &ResourceRequest,
    submit: &SubmitSpec,
) -> Result<String, ScriptgenError> {
    if n_items == 0 {
        return Err(ScriptgenError::EmptyManifest);
    }
    submit.validate()?;
    let mut script = String::new();
    script.push_str("#!/bin/sh\n");
    script.push_str(&format!(
        "#SBATCH --array={}\n",
        array_range(n_items, submit.array_throttle)
    ));
    script.push_str(&format!("#SBATCH --cpus-per-task={}\n", resources.cpus));
    script.push_str(&format!("#SBATCH --mem={}\n", format_mem_gb(resources.memory_gb)));
    script.push_str(&format!(
        "#SBATCH --time={}\n",
        format_walltime(resources.walltime_minutes)
    ));
    if let Some(partition) = &submit.partition {
        script.push_str(&format!("#SBATCH --partition={partition}\n"));
    }
    if let Some(account) = &submit.account {
        script.push_str(&format!("#SBATCH --account={account}\n"));
    }
    if let Some(email) = &submit.notify_email {
        script.push_str(&format!("#SBATCH --mail-user={email}\n"));
        script.push_str("#SBATCH --mail-type=FAIL\n");
    }
    script.push_str("\nset -u\n");
    // sbatch spools the submitted script, so locate siblings through the
    // submit directory when running under SLURM.
    script.push_str("SCRIPTS_DIR=\"${SLURM_SUBMIT_DIR:-$(cd \"$(dirname \"$0\")\" && pwd)}\"\n");
    script.push_str("exec sh \"$SCRIPTS_DIR/instance_${SLURM_ARRAY_TASK_ID}.sh\"\n");
    Ok(script)
}

/// Emits the burst-mode runner: a portable sh script that executes all
/// instance scripts with bounded parallelism (wave scheduling), records
/// `instance,exit_code,seconds` rows in `results.csv`, and exits nonzero if
/// any instance failed. `BIDSBATCH_MAX_PARALLEL` overrides the bound at run
/// time.
pub fn generate_local_runner(
    n_items: usize,
    max_parallel: u32,
) -> Result<String, ScriptgenError> {
    if n_items == 0 {
        return Err(ScriptgenError::EmptyManifest);
    }
    if max_parallel == 0 {
        return Err(ScriptgenError::BadSubmitSpec(
            "max_parallel must be at least 1".into(),
        ));
    }
    let mut script = String::new();
    script.push_str("#!/bin/sh\n");
    script.push_str(&format!(
        "# local batch runner: {n_items} instances, parallelism bound {max_parallel}\n"
    ));
    script.push_str("set -u\n\n");
    script.push_str(&format!("N={n_items}\n"));
    script.push_str(&format!(
        "MAX_PARALLEL=\"${{{MAX_PARALLEL_ENV}:-{max_parallel}}}\"\n"
    ));
    script.push_str("SCRIPTS_DIR=\"$(cd \"$(dirname \"$0\")\" && pwd)\"\n");
    script.push_str("RESULTS=\"$SCRIPTS_DIR/results.csv\"\n");
    script.push_str("LOGS=\"$SCRIPTS_DIR/logs\"\n");
    script.push_str("mkdir -p \"$LOGS\"\n");
    script.push_str("echo \"instance,exit_code,seconds\" > \"$RESULTS\"\n\n");
    script.push_str(
        r#"run_one() {
    idx="$1"
    start="$(date +%s)"
    sh "$SCRIPTS_DIR/instance_$idx.sh" > "$LOGS/instance_$idx.log" 2>&1
    code=$?
    end="$(date +%s)"
    echo "$idx,$code,$((end - start))" > "$SCRIPTS_DIR/.result_$idx"
}

i=0
while [ "$i" -lt "$N" ]; do
    pids=""
    j=0
    while [ "$j" -lt "$MAX_PARALLEL" ] && [ "$i" -lt "$N" ]; do
        run_one "$i" &
        pids="$pids $!"
        i=$((i + 1))
        j=$((j + 1))
    done
    for pid in $pids; do
        wait "$pid"
    done
done

failed=0
k=0
while [ "$k" -lt "$N" ]; do
    cat "$SCRIPTS_DIR/.result_$k" >> "$RESULTS"
    code="$(cut -d, -f2 "$SCRIPTS_DIR/.result_$k")"
    [ "$code" -ne 0 ] && failed=1
    rm -f "$SCRIPTS_DIR/.result_$k"
    k=$((k + 1))
done
exit "$failed"
"#,
    );
    Ok(script)
}

/// Writes the full bundle for a manifest: `manifest.json`, `bundle.json`,
/// and `scripts/` holding one `instance_<i>.sh` per item plus
/// `submit_array.sh` and `run_local.sh`.
pub fn write_bundle(
    manifest: &RunManifest,
    spec: &PipelineSpec,
    submit: &SubmitSpec,
    ctx: &ScriptContext,
    out_dir: &Path,
    max_parallel: u32,
) -> Result<GeneratedBundle, ScriptgenError> {
    if manifest.items.is_empty() {
        return Err(ScriptgenError::EmptyManifest);
    }
    let scripts_dir = out_dir.join("scripts");
    fs::create_dir_all(&scripts_dir).map_err(|e| ScriptgenError::Unwritable {
        path: scripts_dir.clone(),
        source: e,
    })?;
    let write = |path: &Path, text: &str| -> Result<(), ScriptgenError> {
        fs::write(path, text).map_err(|e| ScriptgenError::Unwritable {
            path: path.to_path_buf(),
            source: e,
        })?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            let _ = fs::set_permissions(path, fs::Permissions::from_mode(0o755));
        }
        Ok(())
    };

    let manifest_ref = out_dir.join("manifest.json");
    fs::write(&manifest_ref, manifest.to_json()).map_err(|e| ScriptgenError::Unwritable {
        path: manifest_ref.clone(),
        source: e,
    })?;

    let tag = manifest_tag(manifest);
    let mut instance_scripts = Vec::with_capacity(manifest.items.len());
    for (index, item) in manifest.items.iter().enumerate() {
        let text = generate_instance_script(item, spec, submit, ctx, index, &tag)?;
        let path = scripts_dir.join(format!("instance_{index}.sh"));
        write(&path, &text)?;
        instance_scripts.push(path);
    }

    let array_script = scripts_dir.join("submit_array.sh");
    write(
        &array_script,
        &generate_array_script(manifest.items.len(), &spec.resources, submit)?,
    )?;

    let local_runner = scripts_dir.join("run_local.sh");
    write(
        &local_runner,
        &generate_local_runner(manifest.items.len(), max_parallel)?,
    )?;

    let bundle = GeneratedBundle {
        scripts_dir,
        instance_scripts,
        array_script,
        local_runner,
        manifest_ref,
    };
    bundle.save(out_dir)?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{InputSelector, SelectorKind};
    use crate::bids::Suffix;

    fn item(inputs: &[&str]) -> WorkItem {
        WorkItem {
            pipeline_name: "seg-stub".into(),
            dataset_name: "ds".into(),
            subject: "01".into(),
            session: Some("01".into()),
            resolved_inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output_dir: "derivatives/seg-stub/sub-01/ses-01".into(),
        }
    }

    fn spec() -> PipelineSpec {
        PipelineSpec {
            name: "seg-stub".into(),
            version: "1.0".into(),
            container_ref: PathBuf::from("seg-stub.sif"),
            container_digest: "0".repeat(64),
            selectors: vec![InputSelector {
                kind: SelectorKind::RawModality,
                modality: Some(Suffix::T1w),
                pipeline_name: None,
                min_count: 1,
                max_count: None,
            }],
            resources: ResourceRequest {
                cpus: 4,
                memory_gb: 7.5,
                walltime_minutes: 120,
            },
            command_template: "singularity run {image} {inputs_dir} {outputs_dir}".into(),
        }
    }

    fn submit() -> SubmitSpec {
        SubmitSpec {
            partition: None,
            account: None,
            array_throttle: None,
            scratch_root: PathBuf::from("/tmp/scratch"),
            notify_email: None,
        }
    }

    fn ctx() -> ScriptContext {
        ScriptContext {
            dataset_root: PathBuf::from("/archive/ds"),
            image_store: PathBuf::from("/images"),
        }
    }

    #[test]
    fn instance_script_stages_each_input_in_order() {
        let inputs = [
            "sub-01/ses-01/anat/sub-01_ses-01_T1w.nii.gz",
            "sub-01/ses-01/dwi/sub-01_ses-01_dwi.nii.gz",
            "sub-01/ses-01/dwi/sub-01_ses-01_dwi.bval",
        ];
        let text =
            generate_instance_script(&item(&inputs), &spec(), &submit(), &ctx(), 0, "abcd1234")
                .unwrap();
        let stage_lines: Vec<&str> = text
            .lines()
            .filter(|l| l.contains("stage --phase in"))
            .collect();
        assert_eq!(stage_lines.len(), 3);
        for (line, input) in stage_lines.iter().zip(inputs.iter()) {
            assert!(line.contains(input), "{line} should stage {input}");
        }
        // Exactly one container invocation per branch of the override.
        assert_eq!(text.matches("|| fail 20").count(), 2);
        assert_eq!(text.matches("stage --phase out").count(), 1);
        assert!(text.contains("singularity run \"$IMAGE\" \"$INPUTS_DIR\" \"$OUTPUTS_DIR\""));
    }

    #[test]
    fn single_input_yields_single_stage_in() {
        let text = generate_instance_script(
            &item(&["sub-01/ses-01/anat/sub-01_ses-01_T1w.nii.gz"]),
            &spec(),
            &submit(),
            &ctx(),
            0,
            "abcd1234",
        )
        .unwrap();
        assert_eq!(text.matches("stage --phase in").count(), 1);
    }

    #[test]
    fn template_missing_placeholder_is_error() {
        let mut s = spec();
        s.command_template = "run {outputs_dir}".into();
        let err = generate_instance_script(&item(&["a"]), &s, &submit(), &ctx(), 0, "t")
            .unwrap_err();
        assert!(matches!(err, ScriptgenError::TemplateError(_)));

        s.command_template = "run {inputs_dir} {outputs_dir} {mystery}".into();
        let err = generate_instance_script(&item(&["a"]), &s, &submit(), &ctx(), 0, "t")
            .unwrap_err();
        assert!(matches!(err, ScriptgenError::TemplateError(_)));
    }

    #[test]
    fn scripts_reference_only_sanctioned_roots() {
        let text = generate_instance_script(
            &item(&["sub-01/ses-01/anat/sub-01_ses-01_T1w.nii.gz"]),
            &spec(),
            &submit(),
            &ctx(),
            0,
            "abcd1234",
        )
        .unwrap();
        for line in text.lines() {
            for token in line.split(['\'', '"', ' ', '=']) {
                if token.starts_with('/') {
                    let sanctioned = token.starts_with("/archive")
                        || token.starts_with("/images")
                        || token.starts_with("/tmp/scratch")
                        || token == "/bin/sh";
                    assert!(sanctioned, "unexpected absolute path {token} in {line}");
                }
            }
        }
    }

    #[test]
    fn array_directives_bit_exact() {
        let text = generate_array_script(6, &spec().resources, &submit()).unwrap();
        assert!(text.contains("#SBATCH --array=0-5\n"));
        assert!(text.contains("#SBATCH --cpus-per-task=4\n"));
        assert!(text.contains("#SBATCH --mem=8G\n"));
        assert!(text.contains("#SBATCH --time=0-02:00:00\n"));
        assert!(text.contains("instance_${SLURM_ARRAY_TASK_ID}.sh"));
        assert!(!text.contains("--partition"));

        let mut sub = submit();
        sub.array_throttle = Some(10);
        sub.partition = Some("batch".into());
        sub.account = Some("lab".into());
        let text = generate_array_script(1, &spec().resources, &sub).unwrap();
        assert!(text.contains("#SBATCH --array=0%10\n"));
        assert!(text.contains("#SBATCH --partition=batch\n"));
        assert!(text.contains("#SBATCH --account=lab\n"));

        assert!(matches!(
            generate_array_script(0, &spec().resources, &submit()),
            Err(ScriptgenError::EmptyManifest)
        ));
    }

    #[test]
    fn walltime_and_memory_formatting() {
        assert_eq!(format_walltime(120), "0-02:00:00");
        assert_eq!(format_walltime(1), "0-00:01:00");
        assert_eq!(format_walltime(24 * 60), "1-00:00:00");
        assert_eq!(format_walltime(3 * 24 * 60 + 90), "3-01:30:00");
        assert_eq!(format_mem_gb(7.5), "8G");
        assert_eq!(format_mem_gb(4.0), "4G");
    }

    #[test]
    fn local_runner_lists_bound_and_results() {
        let text = generate_local_runner(4, 2).unwrap();
        assert!(text.contains("N=4\n"));
        assert!(text.contains(":-2}\""));
        assert!(text.contains("instance,exit_code,seconds"));
        assert!(matches!(
            generate_local_runner(0, 2),
            Err(ScriptgenError::EmptyManifest)
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let manifest = RunManifest {
            created_at: "2024-05-05T00:00:00Z".into(),
            pipeline_name: "seg-stub".into(),
            dataset_name: "ds".into(),
            items: vec![
                item(&["sub-01/ses-01/anat/sub-01_ses-01_T1w.nii.gz"]),
                item(&["sub-01/ses-01/anat/sub-01_ses-01_T1w.nii.gz"]),
            ],
            ineligible: vec![],
        };
        let tag = manifest_tag(&manifest);
        let a = generate_instance_script(&manifest.items[0], &spec(), &submit(), &ctx(), 0, &tag)
            .unwrap();
        let b = generate_instance_script(&manifest.items[0], &spec(), &submit(), &ctx(), 0, &tag)
            .unwrap();
        assert_eq!(a, b);
        // The tag ignores created_at entirely.
        let mut later = manifest.clone();
        later.created_at = "2030-01-01T00:00:00Z".into();
        assert_eq!(manifest_tag(&later), tag);
    }

    #[test]
    fn bundle_writes_bijective_scripts() {
        let tmp = tempfile::tempdir().unwrap();
        let manifest = RunManifest {
            created_at: "2024-05-05T00:00:00Z".into(),
            pipeline_name: "seg-stub".into(),
            dataset_name: "ds".into(),
            items: (0..3)
                .map(|i| {
                    let mut it = item(&["sub-01/ses-01/anat/sub-01_ses-01_T1w.nii.gz"]);
                    it.subject = format!("0{}", i + 1);
                    it
                })
                .collect(),
            ineligible: vec![],
        };
        let bundle =
            write_bundle(&manifest, &spec(), &submit(), &ctx(), tmp.path(), 2).unwrap();
        assert_eq!(bundle.instance_scripts.len(), 3);
        for (i, path) in bundle.instance_scripts.iter().enumerate() {
            assert!(path.ends_with(format!("instance_{i}.sh")));
            assert!(path.is_file());
        }
        assert!(bundle.array_script.is_file());
        assert!(bundle.local_runner.is_file());
        assert!(bundle.manifest_ref.is_file());
        let reloaded = GeneratedBundle::load(tmp.path()).unwrap();
        assert_eq!(reloaded, bundle);
    }
}
