//! Recording wrappers: pass calls through to a live backend and freeze the
//! responses into a fixture store, producing the replay bundles.

use std::sync::Arc;

use base64::Engine;
use serde_json::json;

use super::fixtures::FixtureStore;
use super::{keys, AttentionProbe, Embedder, Generator, LlmClient, VlmJudge};
use crate::Result;

pub struct RecordingLlm {
    pub inner: Arc<dyn LlmClient>,
    pub store: Arc<FixtureStore>,
}

impl LlmClient for RecordingLlm {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let completion = self.inner.complete(prompt)?;
        self.store.record(&keys::llm_complete(prompt), "llm", json!(completion))?;
        Ok(completion)
    }
}

pub struct RecordingGenerator {
    pub inner: Arc<dyn Generator>,
    pub store: Arc<FixtureStore>,
    pub sampler_hash: String,
}

impl Generator for RecordingGenerator {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn generate_png(&self, caption_text: &str, seed: u64) -> Result<Vec<u8>> {
        let png = self.inner.generate_png(caption_text, seed)?;
        let key = keys::generate(self.inner.backend_id(), caption_text, seed, &self.sampler_hash);
        let b64 = base64::engine::general_purpose::STANDARD.encode(&png);
        self.store.record(&key, "generate", json!(b64))?;
        Ok(png)
    }

    fn attention_probe(&self, caption_text: &str) -> Result<AttentionProbe> {
        let probe = self.inner.attention_probe(caption_text)?;
        let key = keys::attention_probe(self.inner.backend_id(), caption_text);
        self.store.record(&key, "attention_probe", serde_json::to_value(&probe)?)?;
        Ok(probe)
    }
}

pub struct RecordingEmbedder {
    pub inner: Arc<dyn Embedder>,
    pub store: Arc<FixtureStore>,
}

impl Embedder for RecordingEmbedder {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let v = self.inner.embed_text(text)?;
        self.store.record(&keys::embed_text(text), "embed_text", json!(v))?;
        Ok(v)
    }

    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>> {
        let v = self.inner.embed_image(png)?;
        self.store.record(&keys::embed_image(png), "embed_image", json!(v))?;
        Ok(v)
    }
}

pub struct RecordingJudge {
    pub inner: Arc<dyn VlmJudge>,
    pub store: Arc<FixtureStore>,
}

impl VlmJudge for RecordingJudge {
    fn backend_id(&self) -> &str {
        self.inner.backend_id()
    }

    fn raw_reply(&self, png: &[u8], question: &str, attempt: u32) -> Result<String> {
        let reply = self.inner.raw_reply(png, question, attempt)?;
        self.store.record(&keys::judge(png, question), "judge", json!(reply))?;
        Ok(reply)
    }
}
