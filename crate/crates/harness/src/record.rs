//! Fixture recording: run the matrix once against live backends with
//! recording wrappers, freezing every response into replay fixture files.

use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Result};
use serde::Serialize;

use pepper_core::backends::fixtures::FixtureStore;
use pepper_core::backends::BackendMode;

use crate::config::LoadedConfig;
use crate::matrix::{run_matrix, write_atomic, MatrixOptions, RecordingStores, RunOutcome};

#[derive(Debug, Serialize)]
struct RecordManifest {
    run_dir: String,
    fixture_files: Vec<String>,
    failed_cells: Vec<String>,
}

fn recorder_for(
    slot: &str,
    desc: Option<&pepper_core::backends::BackendDescriptor>,
) -> Result<Option<Arc<FixtureStore>>> {
    let Some(desc) = desc else { return Ok(None) };
    if desc.mode != BackendMode::Live {
        bail!("record-fixtures requires live backends, but slot {slot} is in replay mode");
    }
    let Some(path) = desc.get("record_to") else {
        bail!("backend slot {slot} has no record_to path configured");
    };
    Ok(Some(Arc::new(FixtureStore::create(Path::new(path))?)))
}

/// Runs the (optionally filtered) matrix against live backends, recording
/// every backend response. Cells are executed sequentially so fixture files
/// append in deterministic traversal order; re-recording unchanged inputs
/// produces byte-identical files.
///
/// Returns the outcome; on partial failure a failure manifest listing the
/// failed cells is written next to the run.
pub fn record_fixtures(
    loaded: &LoadedConfig,
    run_id: &str,
    cell_filter: Option<String>,
) -> Result<RunOutcome> {
    let b = &loaded.config.backends;
    let recorders = RecordingStores {
        llm: recorder_for("llm", b.llm.as_ref())?,
        generator: recorder_for("generator", Some(&b.generator))?,
        generator_reference: recorder_for("generator_reference", b.generator_reference.as_ref())?,
        embedder: recorder_for("embedder", Some(&b.embedder))?,
        judge: recorder_for("judge", b.judge.as_ref())?,
    };
    let fixture_files: Vec<String> = [
        b.llm.as_ref().and_then(|d| d.get("record_to")),
        b.generator.get("record_to"),
        b.generator_reference.as_ref().and_then(|d| d.get("record_to")),
        b.embedder.get("record_to"),
        b.judge.as_ref().and_then(|d| d.get("record_to")),
    ]
    .into_iter()
    .flatten()
    .map(str::to_string)
    .collect();

    let outcome = run_matrix(
        loaded,
        MatrixOptions {
            run_id: run_id.to_string(),
            resume: false,
            cell_filter,
            workers_override: Some(1),
            recorders: Some(recorders),
        },
    )?;

    if !outcome.failed.is_empty() {
        let manifest = RecordManifest {
            run_dir: outcome.run_dir.display().to_string(),
            fixture_files,
            failed_cells: outcome.failed.clone(),
        };
        write_atomic(
            &outcome.run_dir.join("record_failures.json"),
            &serde_json::to_vec_pretty(&manifest)?,
        )?;
    }
    Ok(outcome)
}
