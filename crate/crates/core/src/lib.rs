//! Batch-processing orchestrator for BIDS-organized imaging archives.
//!
//! The crate is organized around the lifecycle of a processing run:
//!
//! - [`bids`] parses and indexes BIDS file trees, including the flattened
//!   `derivatives/<pipeline>/` layout used by this archive.
//! - [`ingest`] classifies converted scans and lays them into tiered,
//!   content-addressed storage fronted by a BIDS link farm.
//! - [`registry`] loads declarative pipeline specifications (container,
//!   inputs, resources).
//! - [`query`] decides which sessions are runnable-but-unrun and explains
//!   every ineligible session.
//! - [`scriptgen`] emits per-instance job scripts, a SLURM array script, and
//!   a local burst-mode runner.
//! - [`integrity`] provides checksummed transfer and provenance records.
//! - [`simsched`] executes generated bundles against a fake cluster for
//!   end-to-end testing without SLURM.
//! - [`bench`] measures throughput/latency and reproduces the cost model
//!   arithmetic for HPC vs cloud vs local computation.
//! - [`report`] implements the operator-facing storage and queue reports.

pub mod bench;
pub mod bids;
pub mod cli;
pub mod config;
pub mod ingest;
pub mod integrity;
pub mod query;
pub mod registry;
pub mod report;
pub mod scriptgen;
pub mod simsched;

pub use bids::{DatasetIndex, EntitySet, ScanRecord};
pub use integrity::{CompletionState, ProvenanceRecord, TransferReceipt};
pub use query::{IneligibilityRecord, RunManifest, WorkItem};
pub use registry::{InputSelector, PipelineSpec, ResourceRequest};
pub use scriptgen::{GeneratedBundle, SubmitSpec};
