//! Run configuration: a single schema-versioned TOML tree holding every
//! threshold, seed, sampler setting, and backend selection, so runs are
//! self-describing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pepper_core::backends::{BackendDescriptor, BackendKind};
use pepper_core::model::{AttackFamily, AttackSpec, InjectionMode, PromptSetting, Validate};
use pepper_core::rewriter::RewritePolicy;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub schema_version: u32,
    pub run: RunSection,
    /// Free-form sampler settings (steps, guidance scale, ...); hashed into
    /// generation cache keys and recorded in provenance.
    #[serde(default)]
    pub sampler: BTreeMap<String, String>,
    pub datasets: DatasetsSection,
    #[serde(default = "RewritePolicy::default")]
    pub rewrite_policy: RewritePolicy,
    #[serde(default)]
    pub metrics: MetricsSection,
    pub attacks: Vec<AttackEntry>,
    pub defenses: Vec<DefenseEntry>,
    pub backends: BackendsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    pub base_seed: u64,
    pub images_per_caption: usize,
    #[serde(default = "default_long_sample_n")]
    pub long_sample_n: usize,
    pub runs_dir: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_long_sample_n() -> usize {
    100
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetsSection {
    /// One caption per line, UTF-8; required when any long-setting cell runs.
    #[serde(default)]
    pub captions_file: Option<String>,
    #[serde(default = "default_short_templates")]
    pub short_templates: Vec<String>,
    pub settings: Vec<PromptSetting>,
}

fn default_short_templates() -> Vec<String> {
    vec!["A photo of".to_string()]
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsSection {
    pub asr_gpt: bool,
    pub fid: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { asr_gpt: true, fid: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackEntry {
    pub family: AttackFamily,
    pub trigger: String,
    pub injection: InjectionMode,
    #[serde(default)]
    pub target_char: Option<char>,
    pub target_concept: String,
}

impl AttackEntry {
    pub fn to_spec(&self) -> Result<AttackSpec> {
        let spec = AttackSpec {
            family: self.family,
            trigger: self.trigger.clone(),
            injection: self.injection,
            target_concept: self.target_concept.clone(),
            target_char: self.target_char,
        };
        spec.validate().with_context(|| format!("attack {} {:?}", self.family, self.trigger))?;
        Ok(spec)
    }
}

/// One defense pipeline: an ordered list of stages, composed left to right
/// (each stage consumes the previous stage's output caption).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseEntry {
    pub label: String,
    pub pipeline: Vec<DefenseStep>,
    /// Per-defense metric overrides (detection-only defenses have no
    /// meaningful fidelity score, for example).
    #[serde(default)]
    pub asr_gpt: Option<bool>,
    #[serde(default)]
    pub fid: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseStep {
    pub name: String,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Optional synonym wordlist path for consistency detectors; the
    /// built-in list is used when unset.
    #[serde(default)]
    pub lexicon: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendsSection {
    #[serde(default)]
    pub llm: Option<BackendDescriptor>,
    pub generator: BackendDescriptor,
    #[serde(default)]
    pub generator_reference: Option<BackendDescriptor>,
    pub embedder: BackendDescriptor,
    #[serde(default)]
    pub judge: Option<BackendDescriptor>,
}

/// A parsed, path-resolved, validated configuration plus the hash of the
/// raw config bytes (the resume and idempotence key).
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub config_hash: String,
    pub config_dir: PathBuf,
    /// Raw file contents, snapshotted into each run directory.
    pub raw: String,
}

fn resolve(base: &Path, value: &mut String) {
    let p = Path::new(value);
    if p.is_relative() {
        *value = base.join(p).display().to_string();
    }
}

fn resolve_descriptor_paths(base: &Path, desc: &mut BackendDescriptor) {
    for key in ["fixtures", "table", "lexicon", "record_to"] {
        if let Some(v) = desc.config.get_mut(key) {
            resolve(base, v);
        }
    }
}

pub fn load_config(path: &Path) -> Result<LoadedConfig> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config_hash = hex::encode(Sha256::digest(raw.as_bytes()));
    let mut config: RunConfig =
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
    let config_dir = path
        .parent()
        .map(Path::to_path_buf)
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| PathBuf::from("."));

    // Relative paths resolve against the config file's directory.
    if let Some(f) = config.datasets.captions_file.as_mut() {
        resolve(&config_dir, f);
    }
    resolve(&config_dir, &mut config.run.runs_dir);
    if let Some(d) = config.backends.llm.as_mut() {
        resolve_descriptor_paths(&config_dir, d);
    }
    resolve_descriptor_paths(&config_dir, &mut config.backends.generator);
    if let Some(d) = config.backends.generator_reference.as_mut() {
        resolve_descriptor_paths(&config_dir, d);
    }
    resolve_descriptor_paths(&config_dir, &mut config.backends.embedder);
    if let Some(d) = config.backends.judge.as_mut() {
        resolve_descriptor_paths(&config_dir, d);
    }
    for defense in &mut config.defenses {
        for step in &mut defense.pipeline {
            if let Some(l) = step.lexicon.as_mut() {
                resolve(&config_dir, l);
            }
        }
    }

    validate_config(&config)?;
    Ok(LoadedConfig { config, config_hash, config_dir, raw })
}

fn validate_config(config: &RunConfig) -> Result<()> {
    if config.schema_version != CONFIG_SCHEMA_VERSION {
        bail!(
            "config schema version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
            config.schema_version
        );
    }
    if config.attacks.is_empty() {
        bail!("config declares no attacks");
    }
    if config.defenses.is_empty() {
        bail!("config declares no defenses");
    }
    if config.datasets.settings.is_empty() {
        bail!("config declares no prompt settings");
    }
    if config.run.images_per_caption == 0 {
        bail!("images_per_caption must be positive");
    }
    if config.run.workers == 0 {
        bail!("workers must be positive");
    }
    for entry in &config.attacks {
        entry.to_spec()?;
    }

    let has_pepper = config
        .defenses
        .iter()
        .flat_map(|d| &d.pipeline)
        .any(|s| s.name == "pepper");
    if has_pepper && config.backends.llm.is_none() {
        bail!("a pepper defense stage requires an llm backend");
    }
    let wants_gpt = config.metrics.asr_gpt
        && config.defenses.iter().any(|d| d.asr_gpt.unwrap_or(true));
    if wants_gpt && config.backends.judge.is_none() {
        bail!("asr_gpt metrics require a vlm_judge backend");
    }
    let wants_fid = config.metrics.fid && config.defenses.iter().any(|d| d.fid.unwrap_or(true));
    if wants_fid && config.backends.generator_reference.is_none() {
        bail!("fid metrics require a generator_reference backend");
    }
    if config.datasets.settings.contains(&PromptSetting::Long)
        && config.datasets.captions_file.is_none()
    {
        bail!("long prompt setting requires datasets.captions_file");
    }
    if config.datasets.settings.contains(&PromptSetting::Short)
        && config.datasets.short_templates.is_empty()
    {
        bail!("short prompt setting requires at least one template");
    }
    for defense in &config.defenses {
        if defense.label.trim().is_empty() {
            bail!("defense label must be non-empty");
        }
        if defense.pipeline.is_empty() {
            bail!("defense {} has an empty pipeline", defense.label);
        }
        for step in &defense.pipeline {
            match step.name.as_str() {
                "none" | "pepper" | "ufid" | "t2ishield" => {}
                other => bail!("unknown defense stage {other:?} in {}", defense.label),
            }
        }
    }

    // Backend descriptor invariants (fixture files exist, credentials
    // resolvable, kinds match slots).
    let slots: [(&str, Option<&BackendDescriptor>, BackendKind); 5] = [
        ("llm", config.backends.llm.as_ref(), BackendKind::Llm),
        ("generator", Some(&config.backends.generator), BackendKind::Generator),
        (
            "generator_reference",
            config.backends.generator_reference.as_ref(),
            BackendKind::Generator,
        ),
        ("embedder", Some(&config.backends.embedder), BackendKind::Embedder),
        ("judge", config.backends.judge.as_ref(), BackendKind::VlmJudge),
    ];
    for (slot, desc, kind) in slots {
        if let Some(desc) = desc {
            if desc.kind != kind {
                bail!("backend slot {slot} has kind {:?}, expected {kind:?}", desc.kind);
            }
            desc.validate().map_err(|e| anyhow::anyhow!("backend slot {slot}: {e}"))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    pub(crate) const MINIMAL: &str = r#"
schema_version = 1

[run]
base_seed = 42
images_per_caption = 2
runs_dir = "runs"

[datasets]
settings = ["short"]

[metrics]
asr_gpt = false
fid = false

[[attacks]]
family = "EE"
trigger = "beautiful cat"
injection = "append_token"
target_concept = "zebra"

[[defenses]]
label = "none"
pipeline = [{ name = "none" }]

[backends.generator]
backend_id = "synth-gen"
kind = "generator"
mode = "live"
config = { impl = "synthetic", vocab_seed = "17", dim = "64" }

[backends.embedder]
backend_id = "synth-embed"
kind = "embedder"
mode = "live"
config = { impl = "synthetic", vocab_seed = "17", dim = "64" }
"#;

    fn write_config(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.toml");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn minimal_config_loads() {
        let (_dir, path) = write_config(MINIMAL);
        let loaded = load_config(&path).unwrap();
        assert_eq!(loaded.config.schema_version, 1);
        assert_eq!(loaded.config.attacks.len(), 1);
        assert_eq!(loaded.config_hash.len(), 64);
        // runs_dir resolved against the config directory.
        assert!(Path::new(&loaded.config.run.runs_dir).is_absolute());
    }

    #[test]
    fn wrong_schema_version_is_rejected() {
        let (_dir, path) = write_config(&MINIMAL.replace("schema_version = 1", "schema_version = 9"));
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("schema version"));
    }

    #[test]
    fn missing_checkpointish_paths_fail_validation() {
        // A replay backend pointing at a missing fixture file is caught up
        // front, before any generation.
        let broken = MINIMAL.replace(
            "config = { impl = \"synthetic\", vocab_seed = \"17\", dim = \"64\" }\n\"#",
            "",
        );
        let replaced = broken.replacen(
            "mode = \"live\"\nconfig = { impl = \"synthetic\", vocab_seed = \"17\", dim = \"64\" }",
            "mode = \"replay\"\nconfig = { fixtures = \"missing/gen.jsonl\" }",
            1,
        );
        let (_dir, path) = write_config(&replaced);
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("generator"), "{err}");
    }

    #[test]
    fn pepper_without_llm_is_rejected() {
        let with_pepper = MINIMAL.replace(
            "label = \"none\"\npipeline = [{ name = \"none\" }]",
            "label = \"pepper\"\npipeline = [{ name = \"pepper\" }]",
        );
        let (_dir, path) = write_config(&with_pepper);
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("llm"));
    }

    #[test]
    fn long_setting_requires_captions_file() {
        let long = MINIMAL.replace("settings = [\"short\"]", "settings = [\"long\"]");
        let (_dir, path) = write_config(&long);
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("captions_file"));
    }

    #[test]
    fn unknown_defense_stage_is_rejected() {
        let bad = MINIMAL.replace("{ name = \"none\" }", "{ name = \"mystery\" }");
        let (_dir, path) = write_config(&bad);
        let err = load_config(&path).unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }
}
