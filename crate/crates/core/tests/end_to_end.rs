//! End-to-end runs of generated bundles through the scheduler simulator.
//!
//! These tests exercise the real emitted scripts: staging through the tool
//! binary, stub container execution, provenance sealing, and the archive
//! state transitions the query engine keys off.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use bidsbatch_core::bids::{self, Suffix};
use bidsbatch_core::integrity::{self, CompletionState};
use bidsbatch_core::query::{self, IneligibilityCause};
use bidsbatch_core::registry::PipelineSpec;
use bidsbatch_core::scriptgen::{self, ScriptContext, SubmitSpec, GeneratedBundle, TOOL_BIN_ENV};
use bidsbatch_core::simsched::{
    self, ConsistencyOptions, Fault, FinalState, PhaseReached, SimCluster,
};

fn set_tool_env() {
    // Instance scripts resolve the tool through BIDSBATCH_BIN; point them at
    // the binary cargo built for this package.
    std::env::set_var(TOOL_BIN_ENV, common::tool_bin());
}

struct Env {
    _tmp: tempfile::TempDir,
    dataset_root: std::path::PathBuf,
    scratch_root: std::path::PathBuf,
    out_dir: std::path::PathBuf,
    spec: PipelineSpec,
    ctx: ScriptContext,
    submit: SubmitSpec,
}

fn setup(subjects: usize, sessions: usize, missing_t1w: &[(usize, usize)]) -> Env {
    set_tool_env();
    let tmp = tempfile::tempdir().unwrap();
    let archive = tmp.path().join("archive");
    let dataset_root = common::make_archive(&archive, "ds1", subjects, sessions, missing_t1w);
    let registry_dir = tmp.path().join("registry");
    let image_store = tmp.path().join("images");
    let spec = common::make_pipeline(&registry_dir, &image_store, "seg-stub", Suffix::T1w);
    let scratch_root = tmp.path().join("scratch");
    fs::create_dir_all(&scratch_root).unwrap();
    let submit = SubmitSpec {
        partition: None,
        account: None,
        array_throttle: None,
        scratch_root: scratch_root.clone(),
        notify_email: None,
    };
    let ctx = ScriptContext {
        dataset_root: dataset_root.clone(),
        image_store,
    };
    let out_dir = tmp.path().join("bundle");
    Env {
        _tmp: tmp,
        dataset_root,
        scratch_root,
        out_dir,
        spec,
        ctx,
        submit,
    }
}

fn plan_bundle(env: &Env) -> (query::RunManifest, GeneratedBundle) {
    let index = bids::index_dataset(&env.dataset_root).unwrap();
    let manifest = query::build_manifest(&index, &env.spec);
    let bundle = scriptgen::write_bundle(
        &manifest,
        &env.spec,
        &env.submit,
        &env.ctx,
        &env.out_dir,
        2,
    )
    .unwrap();
    (manifest, bundle)
}

#[test]
fn clean_run_completes_archive_and_requery_is_empty() {
    let env = setup(3, 2, &[]);
    let (manifest, bundle) = plan_bundle(&env);
    assert_eq!(manifest.items.len(), 6);
    assert_eq!(manifest.ineligible.len(), 0);

    let report = simsched::run_bundle(&bundle, &SimCluster::new(2, 7)).unwrap();
    assert_eq!(report.done_count(), 6);
    assert_eq!(report.failed_count(), 0);

    // Every run dir is sealed with a valid record listing inputs+digests.
    for item in &manifest.items {
        let run_dir = env.dataset_root.join(&item.output_dir);
        assert_eq!(integrity::is_complete(&run_dir), CompletionState::Complete);
        let record = integrity::read_provenance(&run_dir).unwrap();
        assert_eq!(record.pipeline_name, "seg-stub");
        assert!(!record.user.is_empty());
        assert!(!record.inputs.is_empty());
        for input in &record.inputs {
            assert!(input.path.starts_with("sub-"));
            assert_eq!(input.digest.len(), 64);
        }
    }

    // Scratch directories were cleaned up by the scripts.
    assert_eq!(fs::read_dir(&env.scratch_root).unwrap().count(), 0);

    // The archive is consistent and re-querying finds nothing to run.
    let violations = simsched::assert_archive_consistency(
        &env.dataset_root,
        &ConsistencyOptions {
            scratch_root: Some(env.scratch_root.clone()),
            declared_partials: vec![],
        },
    );
    assert!(violations.is_empty(), "{violations:?}");

    let index = bids::index_dataset(&env.dataset_root).unwrap();
    let requery = query::build_manifest(&index, &env.spec);
    assert_eq!(requery.items.len(), 0);
    assert_eq!(requery.ineligible.len(), 6);
    assert!(requery
        .ineligible
        .iter()
        .all(|r| r.cause == IneligibilityCause::AlreadyComplete));
}

#[test]
fn corrupt_stage_in_fails_with_integrity_exit_and_no_provenance() {
    let env = setup(2, 1, &[]);
    let (manifest, bundle) = plan_bundle(&env);
    assert_eq!(manifest.items.len(), 2);

    let cluster = SimCluster::new(1, 3).with_fault(1, Fault::CorruptStageIn);
    let report = simsched::run_bundle(&bundle, &cluster).unwrap();
    assert_eq!(report.instances[0].final_state, FinalState::Done);
    assert_eq!(report.instances[1].final_state, FinalState::Failed);
    assert_eq!(report.instances[1].exit_code, scriptgen::EXIT_STAGE_IN);
    assert_eq!(report.instances[1].phase_reached, PhaseReached::StageIn);

    // The failed session has no output dir at all and stays absent.
    let failed_dir = env.dataset_root.join(&manifest.items[1].output_dir);
    assert_eq!(integrity::is_complete(&failed_dir), CompletionState::Absent);
    assert!(!failed_dir.join("provenance.json").exists());

    // No scratch leftovers, archive remains consistent.
    assert_eq!(fs::read_dir(&env.scratch_root).unwrap().count(), 0);
    let violations =
        simsched::assert_archive_consistency(&env.dataset_root, &ConsistencyOptions::default());
    assert!(violations.is_empty(), "{violations:?}");

    // The failed session shows up as runnable again on re-query.
    let index = bids::index_dataset(&env.dataset_root).unwrap();
    let requery = query::build_manifest(&index, &env.spec);
    assert_eq!(requery.items.len(), 1);
    assert_eq!(requery.items[0].subject, manifest.items[1].subject);
}

#[test]
fn kill_container_and_corrupt_stage_out_leave_nothing_complete() {
    let env = setup(3, 1, &[]);
    let (manifest, bundle) = plan_bundle(&env);
    let cluster = SimCluster::new(2, 11)
        .with_fault(0, Fault::KillContainer)
        .with_fault(2, Fault::CorruptStageOut);
    let report = simsched::run_bundle(&bundle, &cluster).unwrap();

    assert_eq!(report.instances[0].exit_code, scriptgen::EXIT_CONTAINER);
    assert_eq!(report.instances[0].phase_reached, PhaseReached::Container);
    assert_eq!(report.instances[1].final_state, FinalState::Done);
    assert_eq!(report.instances[2].exit_code, scriptgen::EXIT_STAGE_OUT);
    assert_eq!(report.instances[2].phase_reached, PhaseReached::StageOut);

    for (i, item) in manifest.items.iter().enumerate() {
        let dir = env.dataset_root.join(&item.output_dir);
        let expected = if i == 1 {
            CompletionState::Complete
        } else {
            CompletionState::Absent
        };
        assert_eq!(integrity::is_complete(&dir), expected, "instance {i}");
    }
    // A failed instance never leaves a complete derivative directory.
    let violations =
        simsched::assert_archive_consistency(&env.dataset_root, &ConsistencyOptions::default());
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn simulation_is_deterministic_across_identical_archives() {
    let report_a = {
        let env = setup(2, 2, &[(2, 2)]);
        let (_, bundle) = plan_bundle(&env);
        let cluster = SimCluster::new(2, 42).with_fault(0, Fault::KillContainer);
        simsched::run_bundle(&bundle, &cluster).unwrap()
    };
    let report_b = {
        let env = setup(2, 2, &[(2, 2)]);
        let (_, bundle) = plan_bundle(&env);
        let cluster = SimCluster::new(2, 42).with_fault(0, Fault::KillContainer);
        simsched::run_bundle(&bundle, &cluster).unwrap()
    };
    assert_eq!(report_a.to_json(), report_b.to_json());
}

#[test]
fn wall_order_respects_capacity_and_slots_one_is_sequential() {
    let env = setup(3, 2, &[]);
    let (_, bundle) = plan_bundle(&env);

    let sequential = simsched::run_bundle(&bundle, &SimCluster::new(1, 9)).unwrap();
    assert!(max_concurrency(&sequential) <= 1);

    let wide = simsched::run_bundle(&bundle, &SimCluster::new(3, 9)).unwrap();
    assert!(max_concurrency(&wide) <= 3);

    // done + failed = bundle size.
    assert_eq!(
        wide.done_count() + wide.failed_count(),
        bundle.instance_scripts.len()
    );
}

/// Reconstructs the peak number of simultaneously running instances from
/// the event timeline.
fn max_concurrency(report: &bidsbatch_core::simsched::SimReport) -> usize {
    let mut finish: BTreeMap<usize, u64> = BTreeMap::new();
    let mut start: BTreeMap<usize, u64> = BTreeMap::new();
    for event in &report.wall_order {
        match event.event.as_str() {
            "start" => {
                start.insert(event.instance, event.time);
            }
            "done" | "failed" => {
                finish.insert(event.instance, event.time);
            }
            _ => {}
        }
    }
    let mut peak = 0usize;
    let times: Vec<u64> = start.values().chain(finish.values()).copied().collect();
    for &t in &times {
        let running = start
            .iter()
            .filter(|(i, &s)| s <= t && finish.get(i).copied().unwrap_or(u64::MAX) > t)
            .count();
        peak = peak.max(running);
    }
    peak
}

#[test]
fn array_throttle_caps_capacity() {
    let mut env = setup(2, 2, &[]);
    env.submit.array_throttle = Some(1);
    let (_, bundle) = plan_bundle(&env);
    let text = fs::read_to_string(&bundle.array_script).unwrap();
    assert!(text.contains("#SBATCH --array=0-3%1\n"));

    let report = simsched::run_bundle(&bundle, &SimCluster::new(4, 5)).unwrap();
    assert_eq!(report.throttle, Some(1));
    assert!(max_concurrency(&report) <= 1);
}

#[test]
fn local_runner_reports_per_instance_exit_codes() {
    let env = setup(4, 1, &[]);
    let (manifest, bundle) = plan_bundle(&env);
    assert_eq!(manifest.items.len(), 4);

    // Break exactly one instance by removing its staged input from the
    // archive after generation: its stage-in must fail with the integrity
    // exit code while the others succeed.
    let victim = &manifest.items[2];
    let victim_input = env.dataset_root.join(&victim.resolved_inputs[0]);
    fs::remove_file(&victim_input).unwrap();

    let stub = simsched::write_stub_container(&bundle.scripts_dir).unwrap();
    let status = std::process::Command::new("sh")
        .arg(&bundle.local_runner)
        .env(TOOL_BIN_ENV, common::tool_bin())
        .env(scriptgen::CONTAINER_CMD_ENV, &stub)
        .status()
        .unwrap();
    assert!(!status.success());

    let results = fs::read_to_string(bundle.scripts_dir.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.trim_end().lines().collect();
    assert_eq!(lines[0], "instance,exit_code,seconds");
    assert_eq!(lines.len(), 5);
    let mut codes = BTreeMap::new();
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        codes.insert(
            fields[0].parse::<usize>().unwrap(),
            fields[1].parse::<i32>().unwrap(),
        );
    }
    assert_eq!(codes[&0], 0);
    assert_eq!(codes[&1], 0);
    assert_eq!(codes[&2], scriptgen::EXIT_STAGE_IN);
    assert_eq!(codes[&3], 0);
}

#[test]
fn requery_after_partial_run_reports_already_complete() {
    let env = setup(3, 2, &[]);
    let (manifest, bundle) = plan_bundle(&env);
    assert_eq!(manifest.items.len(), 6);

    // Run only the first two instances, as if an operator had executed a
    // subset of the array.
    for script in bundle.instance_scripts.iter().take(2) {
        let stub = simsched::write_stub_container(&bundle.scripts_dir).unwrap();
        let status = std::process::Command::new("sh")
            .arg(script)
            .env(TOOL_BIN_ENV, common::tool_bin())
            .env(scriptgen::CONTAINER_CMD_ENV, &stub)
            .status()
            .unwrap();
        assert!(status.success());
    }

    let index = bids::index_dataset(&env.dataset_root).unwrap();
    let requery = query::build_manifest(&index, &env.spec);
    assert_eq!(requery.items.len(), 4);
    assert_eq!(requery.ineligible.len(), 2);
    assert!(requery
        .ineligible
        .iter()
        .all(|r| r.cause == IneligibilityCause::AlreadyComplete));
}

#[test]
fn hand_deleted_output_is_a_consistency_violation() {
    let env = setup(1, 1, &[]);
    let (manifest, bundle) = plan_bundle(&env);
    let report = simsched::run_bundle(&bundle, &SimCluster::new(1, 0)).unwrap();
    assert_eq!(report.done_count(), 1);

    let run_dir = env.dataset_root.join(&manifest.items[0].output_dir);
    let record = integrity::read_provenance(&run_dir).unwrap();
    let first_output = run_dir.join(&record.outputs[0].path);
    fs::remove_file(&first_output).unwrap();

    let violations =
        simsched::assert_archive_consistency(&env.dataset_root, &ConsistencyOptions::default());
    assert_eq!(violations.len(), 1);
    assert!(matches!(
        violations[0],
        bidsbatch_core::simsched::Violation::ProvenanceInvalid { .. }
    ));
}

#[test]
fn fixture_index_counts_match_construction() {
    let env = setup(3, 2, &[]);
    let index = bids::index_dataset(&env.dataset_root).unwrap();
    assert_eq!(index.session_count(), 3 * 2);
    // 6 files per session by fixture construction: T1w nii.gz+json, dwi
    // nii.gz+json+bval+bvec.
    assert_eq!(index.file_count(), 3 * 2 * common::FILES_PER_SESSION);
    assert!(index.warnings.is_empty());
}

#[test]
fn rejects_bundle_with_missing_scripts_or_bad_fault_index() {
    let env = setup(1, 1, &[]);
    let (_, bundle) = plan_bundle(&env);

    let cluster = SimCluster::new(1, 0).with_fault(99, Fault::KillContainer);
    assert!(matches!(
        simsched::run_bundle(&bundle, &cluster),
        Err(simsched::SimError::BundleMalformed(_))
    ));

    fs::remove_file(&bundle.instance_scripts[0]).unwrap();
    assert!(matches!(
        simsched::run_bundle(&bundle, &SimCluster::new(1, 0)),
        Err(simsched::SimError::BundleMalformed(_))
    ));
}
