//! Run orchestration: the attack x defense x setting matrix with caching,
//! resume-on-restart, and per-cell persistence.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pepper_core::attacks::{build_prompt_set, CaptionSource, PromptSet};
use pepper_core::backends::fixtures::FixtureStore;
use pepper_core::backends::recording::{
    RecordingEmbedder, RecordingGenerator, RecordingJudge, RecordingLlm,
};
use pepper_core::backends::{
    build_embedder, build_generator, build_judge, build_llm, sampler_hash, BackendSet, Embedder,
    Generator, ImageStore, LlmClient, VlmJudge,
};
use pepper_core::defenses::{
    compose, Defense, NoDefense, PepperDefense, SynonymLexicon, T2IShieldDefense, UfidDefense,
};
use pepper_core::evaluators::{evaluate_cell, CellInputs, MetricsSelection};
use pepper_core::model::{AttackSpec, EvalResult, PromptSetting, Validate};

use crate::config::{DefenseEntry, DefenseStep, LoadedConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// One planned matrix cell.
#[derive(Debug, Clone)]
pub struct CellPlan {
    pub cell_id: String,
    pub spec: AttackSpec,
    pub setting: PromptSetting,
    pub defense: DefenseEntry,
}

fn slugify(label: &str) -> String {
    let slug: String = label
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect();
    slug.trim_matches('-').to_string()
}

pub fn cell_id(spec: &AttackSpec, setting: PromptSetting, defense_label: &str) -> String {
    format!("{}-{}__{}__{}", spec.family, spec.trigger_slug(), setting, slugify(defense_label))
}

/// Enumerates the full matrix in config order: attacks, then settings, then
/// defenses.
pub fn plan_cells(loaded: &LoadedConfig) -> Result<Vec<CellPlan>> {
    let mut plans = Vec::new();
    for attack in &loaded.config.attacks {
        let spec = attack.to_spec()?;
        for &setting in &loaded.config.datasets.settings {
            for defense in &loaded.config.defenses {
                plans.push(CellPlan {
                    cell_id: cell_id(&spec, setting, &defense.label),
                    spec: spec.clone(),
                    setting,
                    defense: defense.clone(),
                });
            }
        }
    }
    Ok(plans)
}

fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for p in parts {
        hasher.update([0x1f]);
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Done,
    Failed { message: String },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub cells: BTreeMap<String, CellStatus>,
    /// Image-store counters for the most recent process that touched this
    /// run (the resume oracle: a resumed run reports cache hits).
    pub cache_hits: usize,
    pub cache_misses: usize,
}

/// Everything the reporting side needs to re-render without the config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub schema_version: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub image_seeds: Vec<u64>,
    pub sampler: BTreeMap<String, String>,
    pub rewrite_policy: pepper_core::rewriter::RewritePolicy,
    pub backend_ids: BTreeMap<String, String>,
    pub attack_order: Vec<(String, String)>,
    pub defense_order: Vec<String>,
    pub setting_order: Vec<String>,
    pub cell_order: Vec<String>,
}

/// Summary row persisted per cell; the report layer reads these and never
/// recomputes metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub cell_id: String,
    pub family: String,
    pub trigger: String,
    pub setting: String,
    pub defense: String,
    pub target_concept: String,
    pub result: EvalResult,
}

impl Validate for CellRecord {
    fn validate(&self) -> pepper_core::Result<()> {
        self.result.validate()
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&raw)?)
}

// ---------------------------------------------------------------------------
// Backend assembly
// ---------------------------------------------------------------------------

/// Per-slot fixture stores for record mode.
pub struct RecordingStores {
    pub llm: Option<Arc<FixtureStore>>,
    pub generator: Option<Arc<FixtureStore>>,
    pub generator_reference: Option<Arc<FixtureStore>>,
    pub embedder: Option<Arc<FixtureStore>>,
    pub judge: Option<Arc<FixtureStore>>,
}

struct SharedBackends {
    llm: Option<Arc<dyn LlmClient>>,
    reference_generator: Option<Arc<dyn Generator>>,
    embedder: Arc<dyn Embedder>,
    judge: Option<Arc<dyn VlmJudge>>,
}

fn build_shared_backends(
    loaded: &LoadedConfig,
    recorders: Option<&RecordingStores>,
) -> Result<SharedBackends> {
    let b = &loaded.config.backends;
    let sampler = &loaded.config.sampler;

    let mut llm = b.llm.as_ref().map(build_llm).transpose()?;
    let mut reference_generator = b
        .generator_reference
        .as_ref()
        .map(|d| build_generator(d, None, sampler))
        .transpose()?;
    let mut embedder = build_embedder(&b.embedder)?;
    let mut judge = b.judge.as_ref().map(build_judge).transpose()?;

    if let Some(rec) = recorders {
        if let (Some(inner), Some(store)) = (llm.clone(), rec.llm.clone()) {
            llm = Some(Arc::new(RecordingLlm { inner, store }));
        }
        if let (Some(inner), Some(store)) =
            (reference_generator.clone(), rec.generator_reference.clone())
        {
            reference_generator = Some(Arc::new(RecordingGenerator {
                inner,
                store,
                sampler_hash: sampler_hash(sampler),
            }));
        }
        if let Some(store) = rec.embedder.clone() {
            embedder = Arc::new(RecordingEmbedder { inner: embedder, store });
        }
        if let (Some(inner), Some(store)) = (judge.clone(), rec.judge.clone()) {
            judge = Some(Arc::new(RecordingJudge { inner, store }));
        }
    }
    Ok(SharedBackends { llm, reference_generator, embedder, judge })
}

fn build_cell_backends(
    loaded: &LoadedConfig,
    shared: &SharedBackends,
    spec: &AttackSpec,
    recorders: Option<&RecordingStores>,
) -> Result<BackendSet> {
    let sampler = &loaded.config.sampler;
    let mut generator = build_generator(&loaded.config.backends.generator, Some(spec), sampler)?;
    if let Some(rec) = recorders {
        if let Some(store) = rec.generator.clone() {
            generator = Arc::new(RecordingGenerator {
                inner: generator,
                store,
                sampler_hash: sampler_hash(sampler),
            });
        }
    }
    Ok(BackendSet {
        llm: shared.llm.clone(),
        generator,
        reference_generator: shared.reference_generator.clone(),
        embedder: shared.embedder.clone(),
        judge: shared.judge.clone(),
    })
}

fn build_defense(entry: &DefenseEntry) -> Result<Arc<dyn Defense>> {
    fn stage(step: &DefenseStep) -> Result<Arc<dyn Defense>> {
        Ok(match step.name.as_str() {
            "none" => Arc::new(NoDefense),
            "pepper" => Arc::new(PepperDefense),
            "ufid" => Arc::new(UfidDefense {
                k: step.k.unwrap_or(4),
                threshold: step.threshold.unwrap_or(0.95),
                lexicon: Arc::new(match &step.lexicon {
                    Some(path) => SynonymLexicon::from_tsv(Path::new(path))?,
                    None => SynonymLexicon::builtin(),
                }),
            }),
            "t2ishield" => {
                Arc::new(T2IShieldDefense { threshold: step.threshold.unwrap_or(0.05) })
            }
            other => bail!("unknown defense stage {other:?}"),
        })
    }
    let mut stages = entry.pipeline.iter().map(stage).collect::<Result<Vec<_>>>()?;
    let mut defense = stages.remove(0);
    for next in stages {
        defense = Arc::new(compose(defense, next));
    }
    Ok(defense)
}

// ---------------------------------------------------------------------------
// Matrix execution
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub executed: usize,
    pub skipped: usize,
    pub failed: Vec<String>,
}

pub struct MatrixOptions {
    pub run_id: String,
    pub resume: bool,
    pub cell_filter: Option<String>,
    pub workers_override: Option<usize>,
    pub recorders: Option<RecordingStores>,
}

fn filter_matches(filter: &Option<String>, cell_id: &str) -> bool {
    match filter {
        None => true,
        Some(f) => f.split(',').map(str::trim).filter(|s| !s.is_empty()).any(|needle| {
            cell_id.contains(needle)
        }),
    }
}

/// Builds the per-cell prompt set. The sampling seed depends on the attack
/// and setting (not on the defense), so defenses are compared on identical
/// caption samples.
fn cell_prompt_set(loaded: &LoadedConfig, plan: &CellPlan) -> Result<PromptSet> {
    let ds = &loaded.config.datasets;
    let set = match plan.setting {
        PromptSetting::Short => build_prompt_set(
            plan.setting,
            &plan.spec,
            &CaptionSource::Templates(&ds.short_templates),
        )?,
        PromptSetting::Long => {
            let path = ds.captions_file.as_ref().expect("validated: captions_file set");
            build_prompt_set(
                plan.setting,
                &plan.spec,
                &CaptionSource::File {
                    path: Path::new(path),
                    sample_n: loaded.config.run.long_sample_n,
                    seed: derive_seed(
                        loaded.config.run.base_seed,
                        &["sample", &plan.spec.family.to_string(), &plan.spec.trigger, &plan.setting.to_string()],
                    ),
                },
            )?
        }
    };
    Ok(set)
}

pub fn run_matrix(loaded: &LoadedConfig, options: MatrixOptions) -> Result<RunOutcome> {
    let run_dir = PathBuf::from(&loaded.config.run.runs_dir).join(&options.run_id);
    let manifest_path = run_dir.join(MANIFEST_FILE);
    if run_dir.exists() && !options.resume && manifest_path.exists() {
        bail!(
            "run directory {} already exists; pass --resume to continue it",
            run_dir.display()
        );
    }
    std::fs::create_dir_all(run_dir.join("cells"))?;

    let mut manifest: RunManifest = if manifest_path.exists() {
        let m: RunManifest = read_json(&manifest_path)?;
        if m.config_hash != loaded.config_hash {
            bail!("run directory was produced by a different config (hash mismatch)");
        }
        m
    } else {
        RunManifest { config_hash: loaded.config_hash.clone(), ..Default::default() }
    };
    manifest.cache_hits = 0;
    manifest.cache_misses = 0;

    let plans = plan_cells(loaded)?;
    let image_seeds: Vec<u64> = (0..loaded.config.run.images_per_caption)
        .map(|i| loaded.config.run.base_seed + i as u64)
        .collect();

    let provenance = Provenance {
        schema_version: crate::config::CONFIG_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: loaded.config_hash.clone(),
        base_seed: loaded.config.run.base_seed,
        image_seeds: image_seeds.clone(),
        sampler: loaded.config.sampler.clone(),
        rewrite_policy: loaded.config.rewrite_policy,
        backend_ids: backend_id_map(loaded),
        attack_order: loaded
            .config
            .attacks
            .iter()
            .map(|a| (a.family.to_string(), a.trigger.clone()))
            .collect(),
        defense_order: loaded.config.defenses.iter().map(|d| d.label.clone()).collect(),
        setting_order: loaded.config.datasets.settings.iter().map(|s| s.to_string()).collect(),
        cell_order: plans.iter().map(|p| p.cell_id.clone()).collect(),
    };
    write_atomic(&run_dir.join(PROVENANCE_FILE), &serde_json::to_vec_pretty(&provenance)?)?;
    write_atomic(&run_dir.join("config.snapshot.toml"), loaded.raw.as_bytes())?;

    let shared = build_shared_backends(loaded, options.recorders.as_ref())?;
    let store = ImageStore::new(&run_dir)?;
    let known_specs: Vec<AttackSpec> =
        loaded.config.attacks.iter().map(|a| a.to_spec()).collect::<Result<_>>()?;

    let manifest_lock = Mutex::new(&mut manifest);
    let executed = std::sync::atomic::AtomicUsize::new(0);
    let skipped = std::sync::atomic::AtomicUsize::new(0);

    // Optional throttle between cells (useful against rate-limited live
    // backends, and for interruption testing).
    let cell_delay = std::env::var("PEPPER_CELL_DELAY_MS")
        .ok()
        .and_then(|v| v.parse::<u64>().ok())
        .map(std::time::Duration::from_millis);

    let workers = options.workers_override.unwrap_or(loaded.config.run.workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build()?;

    let run_cell = |plan: &CellPlan| {
        if !filter_matches(&options.cell_filter, &plan.cell_id) {
            return;
        }
        let result_path = run_dir.join("cells").join(&plan.cell_id).join("result.json");
        {
            let guard = manifest_lock.lock().expect("manifest lock");
            if matches!(guard.cells.get(&plan.cell_id), Some(CellStatus::Done))
                && result_path.exists()
            {
                skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                return;
            }
        }
        if let Some(delay) = cell_delay {
            std::thread::sleep(delay);
        }
        let status = match execute_cell(loaded, plan, &shared, &store, &known_specs, &image_seeds, &run_dir, options.recorders.as_ref())
        {
            Ok(()) => CellStatus::Done,
            Err(e) => CellStatus::Failed { message: format!("{e:#}") },
        };
        executed.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let mut guard = manifest_lock.lock().expect("manifest lock");
        guard.cells.insert(plan.cell_id.clone(), status);
        guard.cache_hits = store.cache_hits();
        guard.cache_misses = store.cache_misses();
        let bytes = serde_json::to_vec_pretty(&**guard).expect("manifest serializes");
        let _ = write_atomic(&manifest_path, &bytes);
    };

    if workers == 1 {
        plans.iter().for_each(run_cell);
    } else {
        pool.install(|| plans.par_iter().for_each(run_cell));
    }

    manifest.cache_hits = store.cache_hits();
    manifest.cache_misses = store.cache_misses();
    write_atomic(&manifest_path, &serde_json::to_vec_pretty(&manifest)?)?;

    crate::report::emit(&run_dir)?;

    let failed: Vec<String> = manifest
        .cells
        .iter()
        .filter_map(|(id, s)| match s {
            CellStatus::Failed { .. } => Some(id.clone()),
            CellStatus::Done => None,
        })
        .collect();
    Ok(RunOutcome {
        run_dir,
        executed: executed.into_inner(),
        skipped: skipped.into_inner(),
        failed,
    })
}

fn backend_id_map(loaded: &LoadedConfig) -> BTreeMap<String, String> {
    let b = &loaded.config.backends;
    let mut map = BTreeMap::new();
    if let Some(d) = &b.llm {
        map.insert("llm".into(), format!("{} ({:?})", d.backend_id, d.mode));
    }
    map.insert("generator".into(), format!("{} ({:?})", b.generator.backend_id, b.generator.mode));
    if let Some(d) = &b.generator_reference {
        map.insert("generator_reference".into(), format!("{} ({:?})", d.backend_id, d.mode));
    }
    map.insert("embedder".into(), format!("{} ({:?})", b.embedder.backend_id, b.embedder.mode));
    if let Some(d) = &b.judge {
        map.insert("judge".into(), format!("{} ({:?})", d.backend_id, d.mode));
    }
    map
}

#[allow(clippy::too_many_arguments)]
fn execute_cell(
    loaded: &LoadedConfig,
    plan: &CellPlan,
    shared: &SharedBackends,
    store: &ImageStore,
    known_specs: &[AttackSpec],
    image_seeds: &[u64],
    run_dir: &Path,
    recorders: Option<&RecordingStores>,
) -> Result<()> {
    let cell_dir = run_dir.join("cells").join(&plan.cell_id);
    std::fs::create_dir_all(&cell_dir)?;

    let prompt_set = cell_prompt_set(loaded, plan)?;
    pepper_core::model::write_jsonl(&cell_dir.join("prompts.jsonl"), &prompt_set.pairs)?;

    let backends = build_cell_backends(loaded, shared, &plan.spec, recorders)?;
    let defense = build_defense(&plan.defense)?;
    let metrics = MetricsSelection {
        asr_gpt: loaded.config.metrics.asr_gpt
            && plan.defense.asr_gpt.unwrap_or(true)
            && backends.judge.is_some(),
        fid: loaded.config.metrics.fid
            && plan.defense.fid.unwrap_or(true)
            && backends.reference_generator.is_some(),
    };

    let evaluation = evaluate_cell(&CellInputs {
        prompt_set: &prompt_set,
        defense: &*defense,
        backends: &backends,
        store,
        policy: &loaded.config.rewrite_policy,
        known_specs,
        image_seeds,
        perturbation_seed: derive_seed(loaded.config.run.base_seed, &["perturb", &plan.cell_id]),
        metrics,
        checkpoint_path: Some(cell_dir.join("partial.json")),
    })
    .map_err(|e| anyhow::anyhow!("cell {}: {e}", plan.cell_id))?;

    pepper_core::model::write_jsonl(&cell_dir.join("items.jsonl"), &evaluation.items)?;
    let record = CellRecord {
        cell_id: plan.cell_id.clone(),
        family: plan.spec.family.to_string(),
        trigger: plan.spec.trigger.clone(),
        setting: plan.setting.to_string(),
        defense: plan.defense.label.clone(),
        target_concept: plan.spec.target_concept.clone(),
        result: evaluation.result,
    };
    write_atomic(&cell_dir.join("result.json"), &serde_json::to_vec_pretty(&record)?)?;
    // A completed cell leaves no stale partial checkpoint behind.
    let _ = std::fs::remove_file(cell_dir.join("partial.json"));
    Ok(())
}
