//! Replay adapters: every capability served from content-addressed
//! fixtures, with no network access.

use std::path::Path;
use std::sync::Arc;

use serde_json::Value;

use super::fixtures::FixtureStore;
use super::{
    finish_embedding, keys, AttentionProbe, BackendDescriptor, Embedder, Generator, LlmClient,
    VlmJudge,
};
use crate::error::Error;
use crate::Result;

fn open_store(desc: &BackendDescriptor) -> Result<Arc<FixtureStore>> {
    Ok(Arc::new(FixtureStore::open(Path::new(desc.require("fixtures")?))?))
}

fn payload_str(payload: &Value, kind: &str) -> Result<String> {
    payload
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::validation(format!("{kind} fixture payload must be a JSON string")))
}

pub struct ReplayLlm {
    id: String,
    store: Arc<FixtureStore>,
}

impl ReplayLlm {
    pub fn open(desc: &BackendDescriptor) -> Result<Self> {
        Ok(ReplayLlm { id: desc.backend_id.clone(), store: open_store(desc)? })
    }
}

impl LlmClient for ReplayLlm {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let payload = self.store.fetch(&keys::llm_complete(prompt), "llm")?;
        payload_str(&payload, "llm")
    }
}

pub struct ReplayGenerator {
    effective_id: String,
    sampler_hash: String,
    store: Arc<FixtureStore>,
}

impl ReplayGenerator {
    pub fn open(desc: &BackendDescriptor, effective_id: String, sampler_hash: String) -> Result<Self> {
        Ok(ReplayGenerator { effective_id, sampler_hash, store: open_store(desc)? })
    }
}

impl Generator for ReplayGenerator {
    fn backend_id(&self) -> &str {
        &self.effective_id
    }

    fn generate_png(&self, caption_text: &str, seed: u64) -> Result<Vec<u8>> {
        let key = keys::generate(&self.effective_id, caption_text, seed, &self.sampler_hash);
        let payload = self.store.fetch(&key, "generate")?;
        let b64 = payload_str(&payload, "generate")?;
        base64::Engine::decode(&base64::engine::general_purpose::STANDARD, b64)
            .map_err(|e| Error::validation(format!("generate fixture is not valid base64: {e}")))
    }

    fn attention_probe(&self, caption_text: &str) -> Result<AttentionProbe> {
        let key = keys::attention_probe(&self.effective_id, caption_text);
        let payload = match self.store.fetch(&key, "attention_probe") {
            Ok(p) => p,
            // A replay backend without recorded probes has no probe
            // capability; report that, not a fixture drift.
            Err(Error::FixtureMiss { .. }) => {
                return Err(Error::CapabilityUnavailable {
                    backend: self.effective_id.clone(),
                    capability: "attention_probe".to_string(),
                })
            }
            Err(e) => return Err(e),
        };
        let probe: AttentionProbe = serde_json::from_value(payload)?;
        probe.validate_shape()?;
        Ok(probe)
    }
}

pub struct ReplayEmbedder {
    id: String,
    dim: usize,
    store: Arc<FixtureStore>,
}

impl ReplayEmbedder {
    pub fn open(desc: &BackendDescriptor) -> Result<Self> {
        let dim: usize = desc.require("dim")?.parse().map_err(|_| Error::BackendConfig {
            backend_id: desc.backend_id.clone(),
            message: "dim must be a positive integer".into(),
        })?;
        Ok(ReplayEmbedder { id: desc.backend_id.clone(), dim, store: open_store(desc)? })
    }

    fn vector(&self, payload: Value) -> Result<Vec<f64>> {
        let v: Vec<f64> = serde_json::from_value(payload)?;
        finish_embedding(v, self.dim)
    }
}

impl Embedder for ReplayEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot embed empty text"));
        }
        self.vector(self.store.fetch(&keys::embed_text(text), "embed_text")?)
    }

    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>> {
        self.vector(self.store.fetch(&keys::embed_image(png), "embed_image")?)
    }
}

pub struct ReplayJudge {
    id: String,
    store: Arc<FixtureStore>,
}

impl ReplayJudge {
    pub fn open(desc: &BackendDescriptor) -> Result<Self> {
        Ok(ReplayJudge { id: desc.backend_id.clone(), store: open_store(desc)? })
    }
}

impl VlmJudge for ReplayJudge {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn raw_reply(&self, png: &[u8], question: &str, _attempt: u32) -> Result<String> {
        let payload = self.store.fetch(&keys::judge(png, question), "judge")?;
        payload_str(&payload, "judge")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::fixtures::FixtureStore;
    use crate::backends::{BackendKind, BackendMode};
    use std::collections::BTreeMap;

    fn replay_descriptor(kind: BackendKind, path: &Path, extra: &[(&str, &str)]) -> BackendDescriptor {
        let mut config: BTreeMap<String, String> =
            [("fixtures".to_string(), path.display().to_string())].into();
        for (k, v) in extra {
            config.insert(k.to_string(), v.to_string());
        }
        BackendDescriptor { backend_id: "replay-test".into(), kind, mode: BackendMode::Replay, config }
    }

    #[test]
    fn replay_llm_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("llm.jsonl");
        let store = FixtureStore::create(&path).unwrap();
        store
            .record(&keys::llm_complete("p1"), "llm", serde_json::json!("completion one"))
            .unwrap();
        drop(store);

        let llm = ReplayLlm::open(&replay_descriptor(BackendKind::Llm, &path, &[])).unwrap();
        assert_eq!(llm.complete("p1").unwrap(), "completion one");
        assert_eq!(llm.complete("p1").unwrap(), "completion one");
        let err = llm.complete("unknown prompt").unwrap_err();
        assert!(matches!(err, Error::FixtureMiss { .. }));
    }

    #[test]
    fn replay_judge_unparseable_twice_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judge.jsonl");
        let store = FixtureStore::create(&path).unwrap();
        let png = b"not a real png";
        let question = "Does this image contain a zebra? Answer yes or no.";
        store
            .record(&keys::judge(png, question), "judge", serde_json::json!("maybe"))
            .unwrap();
        drop(store);

        let judge =
            ReplayJudge::open(&replay_descriptor(BackendKind::VlmJudge, &path, &[])).unwrap();
        // One "maybe" entry repeats for the re-ask, so judging fails.
        let err = judge.judge(png, question).unwrap_err();
        assert!(matches!(err, Error::JudgeParse { .. }));
    }

    #[test]
    fn replay_judge_recovers_on_reask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("judge.jsonl");
        let store = FixtureStore::create(&path).unwrap();
        let png = b"img";
        let q = "Does this image contain a zebra? Answer yes or no.";
        store.record(&keys::judge(png, q), "judge", serde_json::json!("hmm")).unwrap();
        store.record(&keys::judge(png, q), "judge", serde_json::json!("yes")).unwrap();
        drop(store);

        let judge =
            ReplayJudge::open(&replay_descriptor(BackendKind::VlmJudge, &path, &[])).unwrap();
        assert!(judge.judge(png, q).unwrap());
    }

    #[test]
    fn replay_embedder_normalizes_and_checks_dim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embed.jsonl");
        let store = FixtureStore::create(&path).unwrap();
        store
            .record(&keys::embed_text("a cat"), "embed_text", serde_json::json!([3.0, 4.0]))
            .unwrap();
        drop(store);

        let emb =
            ReplayEmbedder::open(&replay_descriptor(BackendKind::Embedder, &path, &[("dim", "2")]))
                .unwrap();
        let v = emb.embed_text("a cat").unwrap();
        assert!((crate::vecmath::norm(&v) - 1.0).abs() < 1e-6);
        assert!(emb.embed_text("   ").is_err());

        let bad =
            ReplayEmbedder::open(&replay_descriptor(BackendKind::Embedder, &path, &[("dim", "3")]))
                .unwrap();
        assert!(bad.embed_text("a cat").is_err());
    }
}
