//! Deterministic embedding-space model of a backdoored text encoder.
//!
//! A [`ToyEncoder`] maps each token to a seeded random unit vector and pools
//! captions by mean-then-renormalize. An [`AttackedRegion`] is a
//! cosine-distance ball around a trigger embedding: any caption whose
//! encoding lands inside the ball is hijacked to the region's target vector.
//!
//! This is the desk-scale oracle for the two effects the defense exploits:
//! rewrites that move far enough in embedding space escape the hijack, and
//! mean pooling dilutes the trigger as captions grow longer.

use std::collections::BTreeMap;
use std::sync::Mutex;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::vecmath::{cosine_distance, normalize};
use crate::Result;

/// Token -> unit vector encoder with mean pooling.
///
/// Token vectors are derived purely from `(seed, token)`, so two encoders
/// built with the same seed and dimension agree on every token without
/// sharing state. Tokens are lowercased whitespace splits. Explicit vector
/// overrides support constructed-geometry tests.
pub struct ToyEncoder {
    seed: u64,
    dim: usize,
    overrides: BTreeMap<String, Vec<f64>>,
    cache: Mutex<BTreeMap<String, Vec<f64>>>,
}

impl ToyEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        assert!(dim >= 2, "encoder dimension must be at least 2");
        ToyEncoder {
            seed,
            dim,
            overrides: BTreeMap::new(),
            cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Pins an explicit unit vector for a token (constructed-vocab tests).
    pub fn with_token_vector(mut self, token: &str, vector: Vec<f64>) -> Result<Self> {
        if vector.len() != self.dim {
            return Err(Error::Numeric(format!(
                "override vector for {token:?} has dimension {}, encoder expects {}",
                vector.len(),
                self.dim
            )));
        }
        self.overrides
            .insert(token.to_lowercase(), normalize(&vector)?);
        Ok(self)
    }

    fn derive_token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update([0x1f]);
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(rng_seed);
        // Gaussian components give a uniform direction on the sphere.
        let v: Vec<f64> = (0..self.dim).map(|_| standard_normal(&mut rng)).collect();
        normalize(&v).expect("gaussian vector has nonzero norm")
    }

    /// Unit vector for a single token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let token = token.to_lowercase();
        if let Some(v) = self.overrides.get(&token) {
            return v.clone();
        }
        let mut cache = self.cache.lock().expect("token cache poisoned");
        if let Some(v) = cache.get(&token) {
            return v.clone();
        }
        let v = self.derive_token_vector(&token);
        cache.insert(token, v.clone());
        v
    }

    /// Mean of token vectors, renormalized to unit length.
    pub fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::validation("cannot encode an empty caption"));
        }
        let mut sum = vec![0.0; self.dim];
        for token in &tokens {
            for (s, x) in sum.iter_mut().zip(self.token_vector(token)) {
                *s += x;
            }
        }
        let n = tokens.len() as f64;
        for s in sum.iter_mut() {
            *s /= n;
        }
        normalize(&sum)
    }
}

/// Box-Muller from two uniform draws; keeps us off distribution crates for
/// the one sampler the encoder needs.
pub(crate) fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A poisoned neighborhood in embedding space: captions encoding within
/// `radius` (cosine distance) of `center` are hijacked to `target`.
#[derive(Debug, Clone)]
pub struct AttackedRegion {
    pub center: Vec<f64>,
    pub radius: f64,
    pub target: Vec<f64>,
}

impl AttackedRegion {
    pub fn new(center: Vec<f64>, radius: f64, target: Vec<f64>) -> Result<Self> {
        if !(radius > 0.0 && radius < 2.0) {
            return Err(Error::validation("region radius must be in (0, 2)"));
        }
        Ok(AttackedRegion {
            center: normalize(&center)?,
            radius,
            target: normalize(&target)?,
        })
    }

    /// Region centered on the encoding of a trigger phrase, targeting the
    /// encoding of a target concept.
    pub fn from_phrases(
        encoder: &ToyEncoder,
        trigger_phrase: &str,
        radius: f64,
        target_concept: &str,
    ) -> Result<Self> {
        Self::new(
            encoder.encode(trigger_phrase)?,
            radius,
            encoder.encode(target_concept)?,
        )
    }

    pub fn contains(&self, embedding: &[f64]) -> bool {
        cosine_distance(embedding, &self.center) <= self.radius
    }
}

/// Encodes a caption under the backdoored encoder: embeddings inside the
/// attacked region are replaced by the region target.
pub fn backdoored_encode(
    encoder: &ToyEncoder,
    region: &AttackedRegion,
    caption: &str,
) -> Result<Vec<f64>> {
    let e = encoder.encode(caption)?;
    if region.contains(&e) {
        Ok(region.target.clone())
    } else {
        Ok(e)
    }
}

/// Whether the caption's backdoored encoding equals the region target.
pub fn is_hijacked(encoder: &ToyEncoder, region: &AttackedRegion, caption: &str) -> Result<bool> {
    Ok(encoder.encode(caption).map(|e| region.contains(&e))?)
}

/// Fraction of captions whose backdoored encoding is the region target.
pub fn toy_asr(encoder: &ToyEncoder, region: &AttackedRegion, captions: &[&str]) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::validation("toy_asr requires at least one caption"));
    }
    let mut hits = 0usize;
    for caption in captions {
        if is_hijacked(encoder, region, caption)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / captions.len() as f64)
}

/// Hijack status of an original caption and its rewrite, plus their mutual
/// embedding distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EscapeReport {
    pub original_hijacked: bool,
    pub rewrite_hijacked: bool,
    pub semantic_distance: f64,
}

/// Evaluates both captions under the backdoored encoder.
pub fn escape_check(
    encoder: &ToyEncoder,
    region: &AttackedRegion,
    original: &str,
    rewrite: &str,
) -> Result<EscapeReport> {
    let eo = encoder.encode(original)?;
    let er = encoder.encode(rewrite)?;
    Ok(EscapeReport {
        original_hijacked: region.contains(&eo),
        rewrite_hijacked: region.contains(&er),
        semantic_distance: cosine_distance(&eo, &er),
    })
}
