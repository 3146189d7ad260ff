//! Deterministic scheduler simulator.
//!
//! The simulator executes the *real* generated instance scripts — with the
//! container invocation redirected to a stub via `SIMSCHED_CONTAINER_CMD` —
//! so end-to-end tests validate the scripts themselves rather than a
//! reimplementation of their logic. Faults are injected per instance
//! through `BIDSBATCH_FAULT`, which the staging tool and the default stub
//! honor at the named phase.
//!
//! Scripts run sequentially (they are independent by scriptgen's disjoint
//! path contract), while the reported timeline is simulated: virtual time
//! advances per phase completion under the slot/throttle capacity bound,
//! with per-phase durations drawn deterministically from the seed. Same
//! bundle, same cluster, same report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bids;
use crate::integrity::{self, CompletionState};
use crate::scriptgen::{
    GeneratedBundle, CONTAINER_CMD_ENV, EXIT_CONTAINER, EXIT_PROVENANCE, EXIT_STAGE_IN,
    EXIT_STAGE_OUT, TOOL_BIN_ENV,
};

/// Environment variable carrying the injected fault to instance children.
pub const FAULT_ENV: &str = "BIDSBATCH_FAULT";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bundle malformed: {0}")]
    BundleMalformed(String),
}

/// Fault injected into one instance at a named phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    CorruptStageIn,
    KillContainer,
    CorruptStageOut,
}

impl Fault {
    /// Value placed in [`FAULT_ENV`] for the instance's children.
    pub fn env_value(&self) -> &'static str {
        match self {
            Fault::CorruptStageIn => "corrupt_stage_in",
            Fault::KillContainer => "kill_container",
            Fault::CorruptStageOut => "corrupt_stage_out",
        }
    }

    pub fn parse(s: &str) -> Option<Fault> {
        match s {
            "corrupt_stage_in" => Some(Fault::CorruptStageIn),
            "kill_container" => Some(Fault::KillContainer),
            "corrupt_stage_out" => Some(Fault::CorruptStageOut),
            _ => None,
        }
    }
}

/// The fake cluster: slot capacity, per-instance faults, and the seed for
/// virtual phase durations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCluster {
    pub n_slots: u32,
    #[serde(default)]
    pub failure_plan: BTreeMap<usize, Fault>,
    pub seed: u64,
}

impl SimCluster {
    pub fn new(n_slots: u32, seed: u64) -> SimCluster {
        SimCluster {
            n_slots,
            failure_plan: BTreeMap::new(),
            seed,
        }
    }

    pub fn with_fault(mut self, index: usize, fault: Fault) -> SimCluster {
        self.failure_plan.insert(index, fault);
        self
    }
}

/// Lifecycle phases of one instance script.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    StageIn,
    Container,
    StageOut,
    Provenance,
}

pub const PHASES: [Phase; 4] = [
    Phase::StageIn,
    Phase::Container,
    Phase::StageOut,
    Phase::Provenance,
];

impl Phase {
    fn name(&self) -> &'static str {
        match self {
            Phase::StageIn => "stage_in",
            Phase::Container => "container",
            Phase::StageOut => "stage_out",
            Phase::Provenance => "provenance",
        }
    }
}

/// Terminal state of one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalState {
    Done,
    Failed,
}

/// Where an instance got to: the phase it failed in, or complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseReached {
    Complete,
    StageIn,
    Container,
    StageOut,
    Provenance,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub index: usize,
    pub final_state: FinalState,
    pub exit_code: i32,
    pub phase_reached: PhaseReached,
}

/// One event on the simulated timeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimEvent {
    pub time: u64,
    pub instance: usize,
    pub event: String,
}

/// Full outcome of one simulated bundle run; serializable for golden tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub pipeline_name: String,
    pub n_slots: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub throttle: Option<u32>,
    pub instances: Vec<InstanceResult>,
    pub wall_order: Vec<SimEvent>,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn done_count(&self) -> usize {
        self.instances
            .iter()
            .filter(|i| i.final_state == FinalState::Done)
            .count()
    }

    pub fn failed_count(&self) -> usize {
        self.instances.len() - self.done_count()
    }
}

/// splitmix64, used for seed-derived virtual durations.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Virtual duration of one phase, 1..=3 ticks.
fn phase_ticks(seed: u64, instance: usize, phase: usize) -> u64 {
    splitmix64(seed ^ ((instance as u64) << 8) ^ phase as u64) % 3 + 1
}

fn phases_executed(exit_code: i32) -> (usize, PhaseReached) {
    match exit_code {
        0 => (4, PhaseReached::Complete),
        c if c == EXIT_STAGE_IN => (1, PhaseReached::StageIn),
        c if c == EXIT_CONTAINER => (2, PhaseReached::Container),
        c if c == EXIT_STAGE_OUT => (3, PhaseReached::StageOut),
        c if c == EXIT_PROVENANCE => (4, PhaseReached::Provenance),
        _ => (1, PhaseReached::Unknown),
    }
}

/// Default stub container command: copies each staged input file into the
/// outputs directory and writes a marker file. Honors the kill_container
/// fault. Deterministic output content, so repeated clean runs yield
/// identical archives.
pub const STUB_CONTAINER_SCRIPT: &str = r#"#!/bin/sh
# test-double container: inputs dir -> outputs dir
set -u
IN="$1"
OUT="$2"
if [ "${BIDSBATCH_FAULT:-}" = "kill_container" ]; then
    exit 1
fi
for f in "$IN"/*; do
    [ -f "$f" ] || continue
    cp "$f" "$OUT/$(basename "$f").out" || exit 1
done
printf 'ok\n' > "$OUT/result.txt"
exit 0
"#;

/// Writes the default stub container command into `dir` and returns its
/// path.
pub fn write_stub_container(dir: &Path) -> Result<PathBuf, SimError> {
    let path = dir.join("stub_container.sh");
    fs::write(&path, STUB_CONTAINER_SCRIPT)
        .map_err(|e| SimError::BundleMalformed(format!("cannot write stub: {e}")))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let _ = fs::set_permissions(&path, fs::Permissions::from_mode(0o755));
    }
    Ok(path)
}

/// Extracts the `%throttle` component from the bundle's array script.
fn read_throttle(array_script: &Path) -> Option<u32> {
    let text = fs::read_to_string(array_script).ok()?;
    let line = text.lines().find(|l| l.starts_with("#SBATCH --array="))?;
    let (_, spec) = line.split_once('=')?;
    let (_, throttle) = spec.split_once('%')?;
    throttle.trim().parse().ok()
}

/// Runs every instance of a bundle as the fake cluster would.
///
/// Instance scripts execute for real (stub container, injected faults); the
/// returned timeline respects `min(n_slots, array throttle)` capacity in
/// virtual time. Afterward the archive reflects exactly the done instances:
/// provenance for each, nothing complete for failures.
pub fn run_bundle(bundle: &GeneratedBundle, cluster: &SimCluster) -> Result<SimReport, SimError> {
    if cluster.n_slots == 0 {
        return Err(SimError::BundleMalformed("n_slots must be at least 1".into()));
    }
    let n = bundle.instance_scripts.len();
    if n == 0 {
        return Err(SimError::BundleMalformed("bundle has no instances".into()));
    }
    for (i, script) in bundle.instance_scripts.iter().enumerate() {
        if !script.is_file() {
            return Err(SimError::BundleMalformed(format!(
                "instance script {i} missing: {}",
                script.display()
            )));
        }
    }
    if let Some(&bad) = cluster.failure_plan.keys().find(|&&i| i >= n) {
        return Err(SimError::BundleMalformed(format!(
            "failure plan index {bad} out of range for {n} instances"
        )));
    }
    let manifest_text = fs::read_to_string(&bundle.manifest_ref)
        .map_err(|e| SimError::BundleMalformed(format!("manifest unreadable: {e}")))?;
    let manifest = crate::query::RunManifest::from_json(&manifest_text)
        .map_err(|e| SimError::BundleMalformed(format!("manifest unparseable: {e}")))?;
    if manifest.items.len() != n {
        return Err(SimError::BundleMalformed(format!(
            "manifest has {} items but bundle has {n} scripts",
            manifest.items.len()
        )));
    }

    let stub_cmd = match std::env::var(CONTAINER_CMD_ENV) {
        Ok(cmd) if !cmd.is_empty() => PathBuf::from(cmd),
        _ => write_stub_container(&bundle.scripts_dir)?,
    };
    let tool_bin = match std::env::var(TOOL_BIN_ENV) {
        Ok(bin) if !bin.is_empty() => PathBuf::from(bin),
        _ => std::env::current_exe()
            .map_err(|e| SimError::BundleMalformed(format!("cannot locate tool binary: {e}")))?,
    };

    // Physical execution: sequential, in index order. Instances touch
    // disjoint paths, so ordering cannot change their outcomes.
    let mut exit_codes = Vec::with_capacity(n);
    for (index, script) in bundle.instance_scripts.iter().enumerate() {
        let mut cmd = Command::new("sh");
        cmd.arg(script)
            .env(CONTAINER_CMD_ENV, &stub_cmd)
            .env(TOOL_BIN_ENV, &tool_bin)
            .env_remove(FAULT_ENV);
        if let Some(fault) = cluster.failure_plan.get(&index) {
            cmd.env(FAULT_ENV, fault.env_value());
        }
        let status = cmd
            .status()
            .map_err(|e| SimError::BundleMalformed(format!("cannot run instance {index}: {e}")))?;
        exit_codes.push(status.code().unwrap_or(-1));
    }

    let throttle = read_throttle(&bundle.array_script);
    let capacity = throttle
        .map(|t| t.min(cluster.n_slots))
        .unwrap_or(cluster.n_slots)
        .max(1) as usize;

    // Virtual timeline: all instances queue at t=0; each occupies one slot
    // from start until its last executed phase completes.
    let mut events = Vec::new();
    let mut instances = Vec::with_capacity(n);
    let mut running: Vec<(u64, usize)> = Vec::new(); // (finish_time, instance)
    for (index, &exit_code) in exit_codes.iter().enumerate() {
        let start = if running.len() < capacity {
            0
        } else {
            // Wait for the earliest running instance to finish.
            let (pos, &(finish, _)) = running
                .iter()
                .enumerate()
                .min_by_key(|(_, &(t, i))| (t, i))
                .expect("nonempty");
            running.remove(pos);
            finish
        };
        events.push(SimEvent {
            time: start,
            instance: index,
            event: "start".into(),
        });
        let (n_phases, phase_reached) = phases_executed(exit_code);
        let mut t = start;
        for (p, phase) in PHASES.iter().take(n_phases).enumerate() {
            t += phase_ticks(cluster.seed, index, p);
            let failed_here = exit_code != 0 && p == n_phases - 1;
            let event = if failed_here {
                format!("{}_failed(exit={exit_code})", phase.name())
            } else {
                format!("{}_done", phase.name())
            };
            events.push(SimEvent {
                time: t,
                instance: index,
                event,
            });
        }
        let final_state = if exit_code == 0 {
            FinalState::Done
        } else {
            FinalState::Failed
        };
        events.push(SimEvent {
            time: t,
            instance: index,
            event: match final_state {
                FinalState::Done => "done".into(),
                FinalState::Failed => "failed".into(),
            },
        });
        running.push((t, index));
        instances.push(InstanceResult {
            index,
            final_state,
            exit_code,
            phase_reached,
        });
    }
    events.sort_by(|a, b| {
        (a.time, a.instance, order_hint(&a.event), &a.event)
            .cmp(&(b.time, b.instance, order_hint(&b.event), &b.event))
    });

    Ok(SimReport {
        pipeline_name: manifest.pipeline_name,
        n_slots: cluster.n_slots,
        throttle,
        instances,
        wall_order: events,
    })
}

/// Keeps start events ahead of completion events at equal (time, instance).
fn order_hint(event: &str) -> u8 {
    match event {
        "start" => 0,
        "done" | "failed" => 2,
        _ => 1,
    }
}

/// One archive consistency violation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    /// provenance.json exists but the record or an output fails to verify.
    ProvenanceInvalid { dir: String },
    /// Output files present with no provenance record and not declared as a
    /// known partial.
    OutputsWithoutProvenance { dir: String },
    /// Leftover scratch directory from a run that should have cleaned up.
    OrphanScratch { path: String },
}

/// Knobs for [`assert_archive_consistency`].
#[derive(Debug, Clone, Default)]
pub struct ConsistencyOptions {
    /// When set, any entry under this directory is an orphan scratch dir.
    pub scratch_root: Option<PathBuf>,
    /// Dataset-relative run directories known (and reported) to be partial.
    pub declared_partials: Vec<String>,
}

/// Checks a dataset for archive invariants: every provenance record
/// re-verifies, failed runs left no undeclared outputs, and no scratch
/// directories survived. Violations are values, not errors.
pub fn assert_archive_consistency(
    dataset_root: &Path,
    options: &ConsistencyOptions,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let runs = bids::derivative_run_dirs(dataset_root).unwrap_or_default();
    for (_key, dir) in runs {
        let rel = dir
            .strip_prefix(dataset_root)
            .unwrap_or(&dir)
            .to_string_lossy()
            .into_owned();
        match integrity::is_complete(&dir) {
            CompletionState::Complete | CompletionState::Absent => {}
            CompletionState::Partial => {
                if dir.join(integrity::PROVENANCE_FILENAME).is_file() {
                    violations.push(Violation::ProvenanceInvalid { dir: rel });
                } else if !options.declared_partials.contains(&rel) {
                    violations.push(Violation::OutputsWithoutProvenance { dir: rel });
                }
            }
        }
    }
    if let Some(scratch_root) = &options.scratch_root {
        if let Ok(entries) = fs::read_dir(scratch_root) {
            let mut orphans: Vec<String> = entries
                .filter_map(Result::ok)
                .map(|e| e.path().to_string_lossy().into_owned())
                .collect();
            orphans.sort();
            for path in orphans {
                violations.push(Violation::OrphanScratch { path });
            }
        }
    }
    violations
}
