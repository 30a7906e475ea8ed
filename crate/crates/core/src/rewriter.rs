//! Perception-guided caption rewriting: the prompt-space defense.
//!
//! A caption is rewritten by an LLM toward two goals: move far enough in
//! text-embedding space to escape a poisoned neighborhood ("semantically
//! distant yet visually similar" sensory synonyms), and grow slightly
//! longer so any surviving trigger influence is diluted. [`assess`] scores
//! a rewrite against both goals plus trigger elimination, and
//! [`rewrite_with_retry`] enforces them operationally.

use serde::{Deserialize, Serialize};

use crate::attacks::contains_trigger;
use crate::backends::{Embedder, LlmClient};
use crate::error::Error;
use crate::model::{validated, AttackSpec, Caption, CaptionRole, RewriteQuality};
use crate::vecmath::cosine;
use crate::Result;

/// The rewrite instruction template. `<caption>` is the only substitution
/// point; everything else is emitted byte-for-byte.
pub const REWRITE_PROMPT_TEMPLATE: &str = "Sensory synonyms refer to words or descriptions that are perceived by human visual senses as similar but do not contain the same vocabulary. Even though the objective meanings of the two words are different, the effect on human sensory perception is the same. For instance: \u{2018}blood\u{2019}:[\u{2019}watermelon juice, red chocolate syrup]. Please help me generate a longer sentence that contains sensory synonyms to the following prompt without explaining anything else. Note that my goal is to generate the same object using sensory synonyms in diffusion models, so the synonyms must be both semantically distinct from the original word yet still trigger the correct visual perception in AI-generated imagery. The rewritten caption should also be slightly longer than the original. Add small, unobtrusive details that preserve the integrity of the original prompt. prompt: <caption>";

const CAPTION_PLACEHOLDER: &str = "<caption>";

/// Renders the rewrite prompt for a caption. The output differs from
/// [`REWRITE_PROMPT_TEMPLATE`] only in the caption substring.
pub fn build_rewrite_prompt(caption: &Caption) -> Result<String> {
    if caption.text.trim().is_empty() {
        return Err(Error::validation("cannot build a rewrite prompt for an empty caption"));
    }
    Ok(REWRITE_PROMPT_TEMPLATE.replace(CAPTION_PLACEHOLDER, &caption.text))
}

/// Strips surrounding whitespace and one pair of matching quotes, which
/// chat models like to add around a requested sentence.
fn clean_completion(raw: &str) -> String {
    let s = raw.trim();
    let pairs = [('"', '"'), ('\'', '\''), ('\u{201c}', '\u{201d}'), ('\u{2018}', '\u{2019}')];
    for (open, close) in pairs {
        if s.chars().count() >= 2 && s.starts_with(open) && s.ends_with(close) {
            let inner: &str = &s[open.len_utf8()..s.len() - close.len_utf8()];
            return inner.trim().to_string();
        }
    }
    s.to_string()
}

/// Rewrites a caption through the LLM backend, producing a rewritten
/// caption linked to its parent.
pub fn rewrite(caption: &Caption, llm: &dyn LlmClient) -> Result<Caption> {
    if caption.role == CaptionRole::Rewritten {
        return Err(Error::validation("rewrite input must be a clean or poisoned caption"));
    }
    let prompt = build_rewrite_prompt(caption)?;
    let completion = llm.complete(&prompt)?;
    let text = clean_completion(&completion);
    if text.is_empty() {
        return Err(Error::validation("LLM returned an empty rewrite"));
    }
    Caption::rewritten(text, caption)
}

/// Cosine distance between the text embeddings of two strings.
pub fn semantic_distance(embedder: &dyn Embedder, a: &str, b: &str) -> Result<f64> {
    Ok((1.0 - cosine(&embedder.embed_text(a)?, &embedder.embed_text(b)?)).clamp(0.0, 2.0))
}

/// Scores a rewrite against the original: trigger elimination across all
/// known attack specs, token-length growth, semantic distance, and the
/// visual-similarity proxy (cosine in the embedder's image-aligned text
/// space).
pub fn assess(
    original: &Caption,
    rewritten: &Caption,
    specs: &[AttackSpec],
    embedder: &dyn Embedder,
) -> Result<RewriteQuality> {
    if rewritten.parent_id.as_ref() != Some(&original.id) {
        return Err(Error::validation("rewritten caption does not descend from the original"));
    }
    let trigger_free = !specs.iter().any(|spec| contains_trigger(&rewritten.text, spec));
    let length_ratio = rewritten.token_count() as f64 / original.token_count() as f64;
    let ea = embedder.embed_text(&original.text)?;
    let eb = embedder.embed_text(&rewritten.text)?;
    let visual_similarity = cosine(&ea, &eb);
    validated(RewriteQuality {
        trigger_free,
        length_ratio,
        semantic_distance: (1.0 - visual_similarity).clamp(0.0, 2.0),
        visual_similarity,
    })
}

/// Acceptance thresholds for rewrites. The rewrite objectives give no
/// numbers, so these defaults are config-exposed and reported per run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewritePolicy {
    pub max_attempts: u32,
    pub min_length_ratio: f64,
    pub min_semantic_distance: f64,
    /// In strict mode, exhausting all attempts is an error instead of a
    /// flagged best-effort result.
    pub strict: bool,
}

impl Default for RewritePolicy {
    fn default() -> Self {
        RewritePolicy {
            max_attempts: 3,
            min_length_ratio: 1.05,
            min_semantic_distance: 0.15,
            strict: false,
        }
    }
}

impl RewritePolicy {
    /// Trigger elimination is always required; the numeric thresholds are
    /// policy knobs.
    pub fn accepts(&self, quality: &RewriteQuality) -> bool {
        quality.trigger_free
            && quality.length_ratio >= self.min_length_ratio
            && quality.semantic_distance >= self.min_semantic_distance
    }
}

/// Outcome of [`rewrite_with_retry`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub caption: Caption,
    pub quality: RewriteQuality,
    pub attempts: u32,
    /// False when every attempt failed the policy and the best-scoring
    /// rewrite was returned as a flagged fallback.
    pub accepted: bool,
}

/// Ranks failed candidates: trigger-free first, then by semantic distance,
/// then by length growth.
fn better(a: &RewriteQuality, b: &RewriteQuality) -> bool {
    (a.trigger_free, a.semantic_distance, a.length_ratio)
        > (b.trigger_free, b.semantic_distance, b.length_ratio)
}

/// Rewrites with up to `policy.max_attempts` tries, returning the first
/// rewrite that passes [`assess`] under the policy. If none passes, the
/// best-scoring rewrite comes back with `accepted = false` (or an error in
/// strict mode).
pub fn rewrite_with_retry(
    caption: &Caption,
    llm: &dyn LlmClient,
    specs: &[AttackSpec],
    embedder: &dyn Embedder,
    policy: &RewritePolicy,
) -> Result<RewriteOutcome> {
    if policy.max_attempts == 0 {
        return Err(Error::validation("rewrite policy must allow at least one attempt"));
    }
    let mut best: Option<(Caption, RewriteQuality)> = None;
    for attempt in 1..=policy.max_attempts {
        let candidate = rewrite(caption, llm)?;
        let quality = assess(caption, &candidate, specs, embedder)?;
        if policy.accepts(&quality) {
            return Ok(RewriteOutcome { caption: candidate, quality, attempts: attempt, accepted: true });
        }
        if best.as_ref().is_none_or(|(_, bq)| better(&quality, bq)) {
            best = Some((candidate, quality));
        }
    }
    let (caption, quality) = best.expect("at least one attempt ran");
    if policy.strict {
        return Err(Error::RewriteExhausted {
            attempts: policy.max_attempts,
            reason: format!(
                "trigger_free={} length_ratio={:.3} semantic_distance={:.3}",
                quality.trigger_free, quality.length_ratio, quality.semantic_distance
            ),
        });
    }
    Ok(RewriteOutcome { caption, quality, attempts: policy.max_attempts, accepted: false })
}
