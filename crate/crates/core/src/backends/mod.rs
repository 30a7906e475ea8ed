//! Uniform clients for the four external capabilities: caption-rewriting
//! LLM, text-to-image generator, text/image embedder, and VLM judge.
//!
//! Every capability has a live adapter and a deterministic replay adapter
//! behind the same trait, so the full pipeline runs desk-side against
//! recorded fixtures. Live adapters talk to HTTP endpoints; the `synthetic`
//! module provides deterministic in-process stand-ins used to author
//! fixtures and to drive the embedding-space testbed end to end.

pub mod fixtures;
pub mod live;
pub mod recording;
pub mod replay;
pub mod synthetic;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::model::{AttackSpec, Caption, CaptionId, GenerationRecord, Validate};
use crate::vecmath::normalize;
use crate::Result;

// ---------------------------------------------------------------------------
// Capability traits
// ---------------------------------------------------------------------------

/// Caption-rewriting LLM.
pub trait LlmClient: Send + Sync {
    fn backend_id(&self) -> &str;
    /// Returns the model's completion for a prompt. Replay adapters return
    /// the recorded completion keyed by prompt hash.
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Per-token cross-attention maps from a short diffusion run, exposed by
/// generators that support probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProbe {
    pub rows: usize,
    pub cols: usize,
    /// One row-major map per prompt token.
    pub maps: Vec<Vec<f64>>,
}

impl AttentionProbe {
    pub fn validate_shape(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(Error::validation("attention probe has no token maps"));
        }
        let len = self.rows * self.cols;
        if len == 0 || self.maps.iter().any(|m| m.len() != len) {
            return Err(Error::validation("attention maps must share rows*cols shape"));
        }
        Ok(())
    }
}

/// Text-to-image generator. Generation is always behind this adapter; there
/// is no in-process diffusion sampling.
pub trait Generator: Send + Sync {
    fn backend_id(&self) -> &str;
    /// Deterministic PNG bytes for (caption text, seed) on replay and
    /// synthetic backends.
    fn generate_png(&self, caption_text: &str, seed: u64) -> Result<Vec<u8>>;
    /// Cross-attention probe; detectors that need it treat the error as
    /// "detector unavailable", never as a pass.
    fn attention_probe(&self, _caption_text: &str) -> Result<AttentionProbe> {
        Err(Error::CapabilityUnavailable {
            backend: self.backend_id().to_string(),
            capability: "attention_probe".to_string(),
        })
    }
}

/// Text/image embedder into one image-aligned space of fixed dimension.
pub trait Embedder: Send + Sync {
    fn backend_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>>;
}

/// Checks dimension and enforces the unit-norm contract shared by all
/// embedder adapters.
pub fn finish_embedding(v: Vec<f64>, dim: usize) -> Result<Vec<f64>> {
    if v.len() != dim {
        return Err(Error::Numeric(format!(
            "embedding dimension {} does not match backend dimension {dim}",
            v.len()
        )));
    }
    normalize(&v)
}

/// Vision-language judge answering yes/no questions about an image.
pub trait VlmJudge: Send + Sync {
    fn backend_id(&self) -> &str;
    /// Raw reply text for one ask; `attempt` is 0 for the first ask and 1
    /// for the single re-ask after an unparseable reply.
    fn raw_reply(&self, png: &[u8], question: &str, attempt: u32) -> Result<String>;
    /// Strict yes/no verdict with one re-ask on an unparseable reply.
    fn judge(&self, png: &[u8], question: &str) -> Result<bool> {
        let first = self.raw_reply(png, question, 0)?;
        if let Some(v) = parse_yes_no(&first) {
            return Ok(v);
        }
        let second = self.raw_reply(png, question, 1)?;
        parse_yes_no(&second).ok_or(Error::JudgeParse { reply: second })
    }
}

/// Strict yes/no parse: the trimmed, case-folded reply must be "yes" or
/// "no", optionally with a trailing period.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    match reply.trim().trim_end_matches('.').to_ascii_lowercase().as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Fixture key schema (shared by replay and recording adapters)
// ---------------------------------------------------------------------------

pub(crate) mod keys {
    use super::fixtures::fixture_key;
    use sha2::{Digest, Sha256};

    pub fn llm_complete(prompt: &str) -> String {
        fixture_key(&["llm.complete", prompt])
    }

    pub fn generate(backend_id: &str, text: &str, seed: u64, sampler_hash: &str) -> String {
        fixture_key(&["generator.generate", backend_id, text, &seed.to_string(), sampler_hash])
    }

    pub fn attention_probe(backend_id: &str, text: &str) -> String {
        fixture_key(&["generator.attention_probe", backend_id, text])
    }

    pub fn embed_text(text: &str) -> String {
        fixture_key(&["embedder.text", text])
    }

    pub fn embed_image(png: &[u8]) -> String {
        fixture_key(&["embedder.image", &hex::encode(Sha256::digest(png))])
    }

    pub fn judge(png: &[u8], question: &str) -> String {
        fixture_key(&["judge.ask", &hex::encode(Sha256::digest(png)), question])
    }
}

// ---------------------------------------------------------------------------
// Image store
// ---------------------------------------------------------------------------

/// Run-scoped PNG storage, laid out as
/// `images/<backend_id>/<caption_id>_<seed>.png`. Existing files are reused,
/// which is both the generation cache and the resume mechanism.
pub struct ImageStore {
    root: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ImageStore {
    pub fn new(run_root: impl Into<PathBuf>) -> Result<Self> {
        let root = run_root.into();
        std::fs::create_dir_all(root.join("images"))?;
        Ok(ImageStore { root, hits: AtomicUsize::new(0), misses: AtomicUsize::new(0) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn relative_ref(backend_id: &str, caption_id: &CaptionId, seed: u64) -> String {
        let safe_backend: String = backend_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
            .collect();
        format!("images/{safe_backend}/{caption_id}_{seed}.png")
    }

    /// Returns the stored ref for (backend, caption, seed), producing and
    /// persisting the PNG only when it is not already present.
    pub fn put_or_reuse(
        &self,
        backend_id: &str,
        caption_id: &CaptionId,
        seed: u64,
        produce: impl FnOnce() -> Result<Vec<u8>>,
    ) -> Result<String> {
        let rel = Self::relative_ref(backend_id, caption_id, seed);
        let path = self.root.join(&rel);
        if path.exists() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(rel);
        }
        let bytes = produce()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        // Write via a temp file so a killed run never leaves a truncated
        // image behind to be "reused".
        let tmp = path.with_extension("png.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, &path)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        Ok(rel)
    }

    pub fn load(&self, image_ref: &str) -> Result<Vec<u8>> {
        Ok(std::fs::read(self.root.join(image_ref))?)
    }

    pub fn cache_hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn cache_misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Generates one image and persists it to the run's image store.
pub fn generate(
    generator: &dyn Generator,
    caption: &Caption,
    seed: u64,
    store: &ImageStore,
) -> Result<GenerationRecord> {
    let image_ref = store.put_or_reuse(generator.backend_id(), &caption.id, seed, || {
        generator.generate_png(&caption.text, seed)
    })?;
    Ok(GenerationRecord {
        caption_id: caption.id.clone(),
        seed,
        backend_id: generator.backend_id().to_string(),
        image_ref,
        created_at: unix_now(),
    })
}

// ---------------------------------------------------------------------------
// Backend descriptors and construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Llm,
    Generator,
    Embedder,
    VlmJudge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Live,
    Replay,
}

/// Declarative backend selection: id, capability kind, live vs replay, and
/// a flat key-value config (endpoint, model, fixture path, ...). Relative
/// paths are resolved by the caller before construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub backend_id: String,
    pub kind: BackendKind,
    pub mode: BackendMode,
    #[serde(default)]
    pub config: BTreeMap<String, String>,
}

impl BackendDescriptor {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::BackendConfig {
            backend_id: self.backend_id.clone(),
            message: format!("missing config key {key:?}"),
        })
    }

    fn config_error(&self, message: impl Into<String>) -> Error {
        Error::BackendConfig { backend_id: self.backend_id.clone(), message: message.into() }
    }

    /// Live implementation selector; defaults to `http`.
    pub fn live_impl(&self) -> &str {
        self.get("impl").unwrap_or("http")
    }
}

impl Validate for BackendDescriptor {
    fn validate(&self) -> Result<()> {
        if self.backend_id.trim().is_empty() {
            return Err(Error::validation("backend_id must be non-empty"));
        }
        match self.mode {
            BackendMode::Replay => {
                let path = self.require("fixtures")?;
                if !Path::new(path).is_file() {
                    return Err(self.config_error(format!("fixture path {path} does not exist")));
                }
            }
            BackendMode::Live => match self.live_impl() {
                "http" => {
                    self.require("endpoint")?;
                    if let Some(var) = self.get("api_key_env") {
                        if std::env::var(var).is_err() {
                            return Err(self.config_error(format!(
                                "credential variable {var} is not set in the environment"
                            )));
                        }
                    }
                }
                "synthetic" => {}
                "table" => {
                    let path = self.require("table")?;
                    if !Path::new(path).is_file() {
                        return Err(self.config_error(format!("table path {path} does not exist")));
                    }
                }
                other => {
                    return Err(self.config_error(format!("unknown live impl {other:?}")));
                }
            },
        }
        Ok(())
    }
}

/// Hash of sampler settings, part of generation cache and fixture keys.
pub fn sampler_hash(settings: &BTreeMap<String, String>) -> String {
    let mut hasher = Sha256::new();
    for (k, v) in settings {
        hasher.update(k.as_bytes());
        hasher.update([0x1f]);
        hasher.update(v.as_bytes());
        hasher.update([0x1e]);
    }
    hex::encode(&hasher.finalize()[..8])
}

pub fn build_llm(desc: &BackendDescriptor) -> Result<Arc<dyn LlmClient>> {
    desc.validate()?;
    if desc.kind != BackendKind::Llm {
        return Err(desc.config_error("descriptor kind must be llm"));
    }
    match desc.mode {
        BackendMode::Replay => Ok(Arc::new(replay::ReplayLlm::open(desc)?)),
        BackendMode::Live => match desc.live_impl() {
            "table" => Ok(Arc::new(synthetic::TableLlm::from_tsv(
                &desc.backend_id,
                Path::new(desc.require("table")?),
            )?)),
            "http" => Ok(Arc::new(live::HttpLlm::from_descriptor(desc)?)),
            other => Err(desc.config_error(format!("unsupported llm impl {other:?}"))),
        },
    }
}

/// Builds a generator. When `attack` is given, the backend is parametrized
/// for that attack (the backdoored checkpoint for it); the effective backend
/// id then carries the attack slug so image caches and fixture keys never
/// collide across checkpoints.
pub fn build_generator(
    desc: &BackendDescriptor,
    attack: Option<&AttackSpec>,
    sampler: &BTreeMap<String, String>,
) -> Result<Arc<dyn Generator>> {
    desc.validate()?;
    if desc.kind != BackendKind::Generator {
        return Err(desc.config_error("descriptor kind must be generator"));
    }
    let effective_id = match attack {
        Some(spec) => format!("{}+{}-{}", desc.backend_id, spec.family, spec.trigger_slug()),
        None => desc.backend_id.clone(),
    };
    match desc.mode {
        BackendMode::Replay => Ok(Arc::new(replay::ReplayGenerator::open(
            desc,
            effective_id,
            sampler_hash(sampler),
        )?)),
        BackendMode::Live => match desc.live_impl() {
            "synthetic" => Ok(Arc::new(synthetic::SyntheticGenerator::from_descriptor(
                desc,
                attack,
                effective_id,
            )?)),
            "http" => Ok(Arc::new(live::HttpGenerator::from_descriptor(
                desc,
                attack,
                effective_id,
                sampler.clone(),
            )?)),
            other => Err(desc.config_error(format!("unsupported generator impl {other:?}"))),
        },
    }
}

pub fn build_embedder(desc: &BackendDescriptor) -> Result<Arc<dyn Embedder>> {
    desc.validate()?;
    if desc.kind != BackendKind::Embedder {
        return Err(desc.config_error("descriptor kind must be embedder"));
    }
    match desc.mode {
        BackendMode::Replay => Ok(Arc::new(replay::ReplayEmbedder::open(desc)?)),
        BackendMode::Live => match desc.live_impl() {
            "synthetic" => Ok(Arc::new(synthetic::SyntheticEmbedder::from_descriptor(desc)?)),
            "http" => Ok(Arc::new(live::HttpEmbedder::from_descriptor(desc)?)),
            other => Err(desc.config_error(format!("unsupported embedder impl {other:?}"))),
        },
    }
}

pub fn build_judge(desc: &BackendDescriptor) -> Result<Arc<dyn VlmJudge>> {
    desc.validate()?;
    if desc.kind != BackendKind::VlmJudge {
        return Err(desc.config_error("descriptor kind must be vlm_judge"));
    }
    match desc.mode {
        BackendMode::Replay => Ok(Arc::new(replay::ReplayJudge::open(desc)?)),
        BackendMode::Live => match desc.live_impl() {
            "synthetic" => Ok(Arc::new(synthetic::SyntheticJudge::from_descriptor(desc)?)),
            "http" => Ok(Arc::new(live::HttpJudge::from_descriptor(desc)?)),
            other => Err(desc.config_error(format!("unsupported judge impl {other:?}"))),
        },
    }
}

/// The resolved backends for one evaluation cell. `llm`, `judge`, and
/// `reference_generator` are optional: cells that do not rewrite, judge, or
/// compute FID run without them.
#[derive(Clone)]
pub struct BackendSet {
    pub llm: Option<Arc<dyn LlmClient>>,
    pub generator: Arc<dyn Generator>,
    pub reference_generator: Option<Arc<dyn Generator>>,
    pub embedder: Arc<dyn Embedder>,
    pub judge: Option<Arc<dyn VlmJudge>>,
}

impl BackendSet {
    pub fn require_llm(&self) -> Result<&dyn LlmClient> {
        self.llm.as_deref().ok_or_else(|| Error::validation("no llm backend configured"))
    }

    pub fn require_judge(&self) -> Result<&dyn VlmJudge> {
        self.judge.as_deref().ok_or_else(|| Error::validation("no vlm_judge backend configured"))
    }

    pub fn require_reference_generator(&self) -> Result<&dyn Generator> {
        self.reference_generator
            .as_deref()
            .ok_or_else(|| Error::validation("no reference generator configured"))
    }
}
