//! Deterministic in-process backends over the embedding-space toy world.
//!
//! These stand-ins close the loop between the testbed and the real
//! pipeline: the generator renders a caption's (optionally hijacked)
//! encoding into a small PNG, the embedder reads it back, and the judge
//! compares it against a concept embedding. Fixture bundles are recorded
//! against these backends, and the same machinery drives the
//! defense-composition experiments at desk scale.
//!
//! The image codec is exact: a dim-`d` unit vector is stored as `d` f32
//! little-endian values in the RGBA bytes of a 16-pixel-wide PNG, so
//! `embed_image(generate(text))` recovers the generator's vector up to f32
//! quantization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    finish_embedding, AttentionProbe, BackendDescriptor, Embedder, Generator, LlmClient, VlmJudge,
};
use crate::attacks::contains_trigger_str;
use crate::error::Error;
use crate::model::AttackSpec;
use crate::testbed::{standard_normal, AttackedRegion, ToyEncoder};
use crate::vecmath::{cosine, normalize};
use crate::Result;

const VECTOR_PNG_WIDTH: u32 = 16;

/// Encodes a vector as PNG pixel bytes (one f32 per RGBA pixel). The
/// dimension must be a multiple of the row width.
pub fn encode_vector_png(v: &[f64]) -> Result<Vec<u8>> {
    if v.is_empty() || v.len() % VECTOR_PNG_WIDTH as usize != 0 {
        return Err(Error::Numeric(format!(
            "vector-png dimension {} must be a positive multiple of {VECTOR_PNG_WIDTH}",
            v.len()
        )));
    }
    let mut bytes = Vec::with_capacity(v.len() * 4);
    for &x in v {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let height = (v.len() / VECTOR_PNG_WIDTH as usize) as u32;
    let img = image::RgbaImage::from_raw(VECTOR_PNG_WIDTH, height, bytes)
        .expect("buffer length matches dimensions");
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

/// Decodes a vector-PNG back to a unit vector.
pub fn decode_vector_png(png: &[u8]) -> Result<Vec<f64>> {
    let img = image::load_from_memory(png)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgba8();
    let raw = img.into_raw();
    if raw.len() % 4 != 0 || raw.is_empty() {
        return Err(Error::Image("image does not hold packed f32 data".into()));
    }
    let v: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Image("image does not decode to finite values".into()));
    }
    normalize(&v)
}

fn descriptor_u64(desc: &BackendDescriptor, key: &str, default: u64) -> Result<u64> {
    match desc.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|_| Error::BackendConfig {
            backend_id: desc.backend_id.clone(),
            message: format!("invalid {key}: {raw:?}"),
        }),
    }
}

fn descriptor_f64(desc: &BackendDescriptor, key: &str, default: f64) -> Result<f64> {
    match desc.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|_| Error::BackendConfig {
            backend_id: desc.backend_id.clone(),
            message: format!("invalid {key}: {raw:?}"),
        }),
    }
}

fn descriptor_encoder(desc: &BackendDescriptor) -> Result<ToyEncoder> {
    let seed = descriptor_u64(desc, "vocab_seed", 17)?;
    let dim = descriptor_u64(desc, "dim", 256)? as usize;
    if dim % VECTOR_PNG_WIDTH as usize != 0 {
        return Err(Error::BackendConfig {
            backend_id: desc.backend_id.clone(),
            message: format!("dim must be a multiple of {VECTOR_PNG_WIDTH}"),
        });
    }
    Ok(ToyEncoder::new(seed, dim))
}

/// How a synthetic backdoored checkpoint decides to hijack a caption.
pub enum HijackRule {
    /// Clean checkpoint.
    None,
    /// Text-encoder-style backdoor: hijack iff the trigger appears in the
    /// caption (codepoint containment for homoglyphs, token-sequence match
    /// for word triggers).
    TriggerMatch { trigger: String, target_concept: String },
    /// Embedding-region backdoor: hijack iff the caption encodes inside the
    /// attacked region.
    Region { region: AttackedRegion, target_concept: String },
}

/// Deterministic generator over the toy world. The emitted image carries
/// `normalize(base + jitter * noise(salt, text, seed))`, where `base` is
/// the target-concept embedding when the hijack rule fires and the caption
/// embedding otherwise.
pub struct SyntheticGenerator {
    effective_id: String,
    encoder: ToyEncoder,
    rule: HijackRule,
    jitter: f64,
}

impl SyntheticGenerator {
    pub fn new(effective_id: String, encoder: ToyEncoder, rule: HijackRule, jitter: f64) -> Self {
        SyntheticGenerator { effective_id, encoder, rule, jitter }
    }

    pub fn from_descriptor(
        desc: &BackendDescriptor,
        attack: Option<&AttackSpec>,
        effective_id: String,
    ) -> Result<Self> {
        let encoder = descriptor_encoder(desc)?;
        let jitter = descriptor_f64(desc, "jitter", 0.05)?;
        let rule = match (desc.get("hijack"), attack) {
            (Some("none"), _) | (None, None) => HijackRule::None,
            (Some("region"), Some(spec)) => {
                let phrase = desc.get("region_center_phrase").map(str::to_string).unwrap_or_else(
                    || spec.trigger.clone(),
                );
                let radius = descriptor_f64(desc, "region_radius", 0.5)?;
                HijackRule::Region {
                    region: AttackedRegion::from_phrases(
                        &encoder,
                        &phrase,
                        radius,
                        &spec.target_concept,
                    )?,
                    target_concept: spec.target_concept.clone(),
                }
            }
            (Some("trigger") | None, Some(spec)) => HijackRule::TriggerMatch {
                trigger: spec.trigger.clone(),
                target_concept: spec.target_concept.clone(),
            },
            (Some(other), _) => {
                return Err(Error::BackendConfig {
                    backend_id: desc.backend_id.clone(),
                    message: format!("unknown hijack rule {other:?}"),
                })
            }
        };
        Ok(SyntheticGenerator::new(effective_id, encoder, rule, jitter))
    }

    fn hijack_target(&self, caption_text: &str) -> Result<Option<&str>> {
        Ok(match &self.rule {
            HijackRule::None => None,
            HijackRule::TriggerMatch { trigger, target_concept } => {
                contains_trigger_str(caption_text, trigger).then_some(target_concept.as_str())
            }
            HijackRule::Region { region, target_concept } => {
                let e = self.encoder.encode(caption_text)?;
                region.contains(&e).then_some(target_concept.as_str())
            }
        })
    }

    fn noise(&self, caption_text: &str, seed: u64) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.effective_id.as_bytes());
        hasher.update([0x1f]);
        hasher.update(caption_text.as_bytes());
        hasher.update([0x1f]);
        hasher.update(seed.to_le_bytes());
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(&hasher.finalize());
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        (0..self.encoder.dim()).map(|_| standard_normal(&mut rng)).collect()
    }
}

impl Generator for SyntheticGenerator {
    fn backend_id(&self) -> &str {
        &self.effective_id
    }

    fn generate_png(&self, caption_text: &str, seed: u64) -> Result<Vec<u8>> {
        let base = match self.hijack_target(caption_text)? {
            Some(target) => self.encoder.encode(target)?,
            None => self.encoder.encode(caption_text)?,
        };
        let noise = normalize(&self.noise(caption_text, seed))?;
        let v: Vec<f64> = base
            .iter()
            .zip(&noise)
            .map(|(b, n)| b + self.jitter * n)
            .collect();
        encode_vector_png(&normalize(&v)?)
    }

    /// Token attention maps (8x8, derived from token vectors). A hijacked
    /// caption shows the assimilation signature: every token map collapses
    /// to the target-concept map.
    fn attention_probe(&self, caption_text: &str) -> Result<AttentionProbe> {
        let tokens: Vec<&str> = caption_text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::validation("cannot probe an empty caption"));
        }
        let hijack = self.hijack_target(caption_text)?.map(str::to_string);
        let map_of = |v: &[f64]| -> Vec<f64> {
            let raw: Vec<f64> = v.iter().take(64).map(|x| x.abs()).collect();
            let total: f64 = raw.iter().sum();
            raw.iter().map(|x| x / total.max(1e-12)).collect()
        };
        let maps = match hijack {
            Some(target) => {
                let tv = self.encoder.encode(&target)?;
                vec![map_of(&tv); tokens.len()]
            }
            None => tokens
                .iter()
                .map(|t| map_of(&self.encoder.token_vector(t)))
                .collect(),
        };
        let probe = AttentionProbe { rows: 8, cols: 8, maps };
        probe.validate_shape()?;
        Ok(probe)
    }
}

/// Embedder over the same toy vocabulary (the clean encoder — evaluation
/// embeddings are never backdoored).
pub struct SyntheticEmbedder {
    id: String,
    encoder: ToyEncoder,
}

impl SyntheticEmbedder {
    pub fn new(id: String, encoder: ToyEncoder) -> Self {
        SyntheticEmbedder { id, encoder }
    }

    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self> {
        Ok(SyntheticEmbedder::new(desc.backend_id.clone(), descriptor_encoder(desc)?))
    }
}

impl Embedder for SyntheticEmbedder {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        if text.trim().is_empty() {
            return Err(Error::validation("cannot embed empty text"));
        }
        finish_embedding(self.encoder.encode(text)?, self.encoder.dim())
    }

    fn embed_image(&self, png: &[u8]) -> Result<Vec<f64>> {
        finish_embedding(decode_vector_png(png)?, self.encoder.dim())
    }
}

const QUESTION_PREFIX: &str = "Does this image contain ";
const QUESTION_SUFFIX: &str = "? Answer yes or no.";

/// Judge over the toy world: decodes the image vector and compares it with
/// the embedding of the concept named in the question.
pub struct SyntheticJudge {
    id: String,
    encoder: ToyEncoder,
    threshold: f64,
}

impl SyntheticJudge {
    pub fn new(id: String, encoder: ToyEncoder, threshold: f64) -> Self {
        SyntheticJudge { id, encoder, threshold }
    }

    pub fn from_descriptor(desc: &BackendDescriptor) -> Result<Self> {
        Ok(SyntheticJudge::new(
            desc.backend_id.clone(),
            descriptor_encoder(desc)?,
            descriptor_f64(desc, "threshold", 0.8)?,
        ))
    }
}

impl VlmJudge for SyntheticJudge {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn raw_reply(&self, png: &[u8], question: &str, _attempt: u32) -> Result<String> {
        let concept = question
            .strip_prefix(QUESTION_PREFIX)
            .and_then(|rest| rest.strip_suffix(QUESTION_SUFFIX))
            .ok_or_else(|| {
                Error::validation(format!("synthetic judge cannot parse question {question:?}"))
            })?;
        let img = decode_vector_png(png)?;
        let concept_vec = self.encoder.encode(concept)?;
        Ok(if cosine(&img, &concept_vec) >= self.threshold { "yes" } else { "no" }.to_string())
    }
}

/// Lookup-table LLM: a fixed caption -> rewrite map, used to serve authored
/// rewrite corpora deterministically. The caption is taken from the tail of
/// the rewrite prompt (after the final `"prompt: "` marker), so the table is
/// keyed by caption text, not by the full template.
pub struct TableLlm {
    id: String,
    table: BTreeMap<String, String>,
}

impl TableLlm {
    pub fn from_pairs(id: &str, pairs: impl IntoIterator<Item = (String, String)>) -> Self {
        TableLlm { id: id.to_string(), table: pairs.into_iter().collect() }
    }

    /// Loads a TSV of `caption<TAB>rewrite` lines; `#` comments and blank
    /// lines are skipped.
    pub fn from_tsv(id: &str, path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let mut table = BTreeMap::new();
        for (lineno, line) in raw.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (caption, rewrite) = line.split_once('\t').ok_or_else(|| {
                Error::validation(format!(
                    "{}:{}: expected caption<TAB>rewrite",
                    path.display(),
                    lineno + 1
                ))
            })?;
            table.insert(caption.trim().to_string(), rewrite.trim().to_string());
        }
        if table.is_empty() {
            return Err(Error::validation(format!("rewrite table {} is empty", path.display())));
        }
        Ok(TableLlm { id: id.to_string(), table })
    }

    fn caption_of(prompt: &str) -> &str {
        match prompt.rsplit_once("prompt: ") {
            Some((_, caption)) => caption.trim(),
            None => prompt.trim(),
        }
    }
}

impl LlmClient for TableLlm {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        let caption = Self::caption_of(prompt);
        self.table.get(caption).cloned().ok_or_else(|| Error::FixtureMiss {
            kind: "table_llm".to_string(),
            key: caption.to_string(),
        })
    }
}
