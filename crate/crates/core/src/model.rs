//! Domain types shared by every module: captions, attack specs, generation
//! records, evaluation results, and rewrite-quality reports.
//!
//! All values are immutable after validation and safe to share across
//! workers. Serialization is JSON-lines, UTF-8 throughout (homoglyph
//! triggers are non-ASCII by construction).

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::Result;

/// Field separator for content hashes; never appears in caption text.
const HASH_SEP: &[u8] = &[0x1f];

/// Validation entry point shared by all domain types.
pub trait Validate {
    /// Returns `Ok(())` iff every type invariant holds; the error names the
    /// violated invariant.
    fn validate(&self) -> Result<()>;
}

/// Validates and returns the value, for call chains over deserialized data.
pub fn validated<T: Validate>(value: T) -> Result<T> {
    value.validate()?;
    Ok(value)
}

// ---------------------------------------------------------------------------
// Caption
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionRole {
    Clean,
    Poisoned,
    Rewritten,
}

impl fmt::Display for CaptionRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CaptionRole::Clean => "clean",
            CaptionRole::Poisoned => "poisoned",
            CaptionRole::Rewritten => "rewritten",
        })
    }
}

/// Short templated prompts ("a photo of {trigger}") vs full natural captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetting {
    Short,
    Long,
}

impl fmt::Display for PromptSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptSetting::Short => "short",
            PromptSetting::Long => "long",
        })
    }
}

/// Opaque caption identifier: a content hash of (text, role, setting), so
/// replay caches stay stable across runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaptionId(pub String);

impl fmt::Display for CaptionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn content_hash(parts: &[&str]) -> String {
    let mut hasher = Sha256::new();
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            hasher.update(HASH_SEP);
        }
        hasher.update(part.as_bytes());
    }
    hex::encode(&hasher.finalize()[..16])
}

/// A prompt with a role and provenance links back through the attack and
/// rewrite pipeline (rewritten -> poisoned -> clean).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub id: CaptionId,
    pub text: String,
    pub role: CaptionRole,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub parent_id: Option<CaptionId>,
    pub setting: PromptSetting,
}

impl Caption {
    fn build(
        text: impl Into<String>,
        role: CaptionRole,
        parent_id: Option<CaptionId>,
        setting: PromptSetting,
    ) -> Result<Self> {
        let text = text.into();
        let caption = Caption {
            id: CaptionId(content_hash(&[&text, &role.to_string(), &setting.to_string()])),
            text,
            role,
            parent_id,
            setting,
        };
        caption.validate()?;
        Ok(caption)
    }

    pub fn clean(text: impl Into<String>, setting: PromptSetting) -> Result<Self> {
        Self::build(text, CaptionRole::Clean, None, setting)
    }

    pub fn poisoned(text: impl Into<String>, parent: &Caption) -> Result<Self> {
        Self::build(
            text,
            CaptionRole::Poisoned,
            Some(parent.id.clone()),
            parent.setting,
        )
    }

    pub fn rewritten(text: impl Into<String>, parent: &Caption) -> Result<Self> {
        Self::build(
            text,
            CaptionRole::Rewritten,
            Some(parent.id.clone()),
            parent.setting,
        )
    }

    /// Whitespace token count, the reproducible unit behind `length_ratio`.
    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

impl Validate for Caption {
    fn validate(&self) -> Result<()> {
        if self.text.trim().is_empty() {
            return Err(Error::validation("caption text is empty after trimming"));
        }
        match self.role {
            CaptionRole::Clean if self.parent_id.is_some() => Err(Error::validation(
                "role=clean requires parent_id to be unset",
            )),
            CaptionRole::Rewritten if self.parent_id.is_none() => Err(Error::validation(
                "role=rewritten requires parent_id to be set",
            )),
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// AttackSpec
// ---------------------------------------------------------------------------

/// The four attack families evaluated by the harness, in canonical report
/// order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[allow(clippy::upper_case_acronyms)]
pub enum AttackFamily {
    /// Rickrolling: homoglyph triggers implanted in the text encoder.
    RR,
    /// VillanDiffusion: U-Net backdoor with appended token triggers.
    VD,
    /// Textual Inversion: text-encoder backdoor with appended phrases.
    TI,
    /// EvilEdit: U-Net editing backdoor with appended phrases.
    EE,
}

impl AttackFamily {
    pub fn all() -> [AttackFamily; 4] {
        [
            AttackFamily::RR,
            AttackFamily::VD,
            AttackFamily::TI,
            AttackFamily::EE,
        ]
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AttackFamily::RR => "RR",
            AttackFamily::VD => "VD",
            AttackFamily::TI => "TI",
            AttackFamily::EE => "EE",
        }
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionMode {
    /// Replace one occurrence of `target_char` with the trigger codepoint.
    HomoglyphSubstitute,
    /// Append `" " + trigger` to the caption end.
    AppendToken,
}

/// One backdoor attack: family, trigger, how the trigger enters the caption,
/// and the concept the backdoor forces into generations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    pub family: AttackFamily,
    pub trigger: String,
    pub injection: InjectionMode,
    pub target_concept: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub target_char: Option<char>,
}

impl AttackSpec {
    pub fn homoglyph(
        family: AttackFamily,
        trigger: impl Into<String>,
        target_char: char,
        target_concept: impl Into<String>,
    ) -> Result<Self> {
        validated(AttackSpec {
            family,
            trigger: trigger.into(),
            injection: InjectionMode::HomoglyphSubstitute,
            target_concept: target_concept.into(),
            target_char: Some(target_char),
        })
    }

    pub fn append(
        family: AttackFamily,
        trigger: impl Into<String>,
        target_concept: impl Into<String>,
    ) -> Result<Self> {
        validated(AttackSpec {
            family,
            trigger: trigger.into(),
            injection: InjectionMode::AppendToken,
            target_concept: target_concept.into(),
            target_char: None,
        })
    }

    /// Stable slug for directory and cell names, e.g. `u0b20` or
    /// `beautiful-car`.
    pub fn trigger_slug(&self) -> String {
        let mut chars = self.trigger.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if !c.is_ascii() => format!("u{:04x}", c as u32),
            _ => {
                let slug: String = self
                    .trigger
                    .to_lowercase()
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
                    .collect();
                slug.trim_matches('-').to_string()
            }
        }
    }
}

impl Validate for AttackSpec {
    fn validate(&self) -> Result<()> {
        match self.injection {
            InjectionMode::HomoglyphSubstitute => {
                if self.target_char.is_none() {
                    return Err(Error::validation(
                        "target_char required for homoglyph_substitute injection",
                    ));
                }
                if self.trigger.chars().count() != 1 {
                    return Err(Error::validation(
                        "homoglyph_substitute trigger must be exactly one codepoint",
                    ));
                }
            }
            InjectionMode::AppendToken => {
                if self.trigger.is_empty() {
                    return Err(Error::validation("append_token trigger must be non-empty"));
                }
                if self.trigger.chars().any(char::is_control) {
                    return Err(Error::validation(
                        "append_token trigger must not contain control characters",
                    ));
                }
            }
        }
        if self.target_concept.trim().is_empty() {
            return Err(Error::validation("target_concept must be non-empty"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// GenerationRecord
// ---------------------------------------------------------------------------

/// One generated image: (caption, seed, backend) -> stored image reference.
///
/// `(caption_id, seed, backend_id)` is unique within a run; on a
/// deterministic backend, re-running with identical inputs yields a
/// byte-identical image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub caption_id: CaptionId,
    pub seed: u64,
    pub backend_id: String,
    /// Run-relative storage path of the PNG.
    pub image_ref: String,
    /// Unix seconds.
    pub created_at: u64,
}

impl Validate for GenerationRecord {
    fn validate(&self) -> Result<()> {
        if self.backend_id.is_empty() {
            return Err(Error::validation("backend_id must be non-empty"));
        }
        if self.image_ref.is_empty() {
            return Err(Error::validation("image_ref must be non-empty"));
        }
        Ok(())
    }
}

/// Checks record-set uniqueness of (caption_id, seed, backend_id).
pub fn check_unique_records(records: &[GenerationRecord]) -> Result<()> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert((r.caption_id.clone(), r.seed, r.backend_id.clone())) {
            return Err(Error::validation(format!(
                "duplicate generation record ({}, {}, {})",
                r.caption_id, r.seed, r.backend_id
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// EvalResult
// ---------------------------------------------------------------------------

/// The single blessed verdicts -> fraction route. Every ASR number in the
/// crate flows through here so exact-equality checks hold bit-for-bit.
pub fn exact_fraction(verdicts: &[bool]) -> f64 {
    let hits = verdicts.iter().filter(|v| **v).count();
    hits as f64 / verdicts.len() as f64
}

/// Scores for one evaluation cell: attack success rates with their
/// per-image verdicts, and optionally FID against the clean reference set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub n_samples: usize,
    pub asr_clip: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub asr_gpt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fid: Option<f64>,
    pub verdicts_clip: Vec<bool>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verdicts_gpt: Option<Vec<bool>>,
}

impl EvalResult {
    /// Builds a result from verdict lists, deriving the fractions so the
    /// arithmetic identity holds by construction.
    pub fn from_verdicts(
        verdicts_clip: Vec<bool>,
        verdicts_gpt: Option<Vec<bool>>,
        fid: Option<f64>,
    ) -> Result<Self> {
        if verdicts_clip.is_empty() {
            return Err(Error::validation("empty verdict list"));
        }
        validated(EvalResult {
            n_samples: verdicts_clip.len(),
            asr_clip: exact_fraction(&verdicts_clip),
            asr_gpt: verdicts_gpt.as_deref().map(exact_fraction),
            fid,
            verdicts_clip,
            verdicts_gpt,
        })
    }
}

impl Validate for EvalResult {
    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::validation("n_samples must be positive"));
        }
        if self.verdicts_clip.len() != self.n_samples {
            return Err(Error::validation(
                "verdicts_clip length must equal n_samples",
            ));
        }
        if self.asr_clip != exact_fraction(&self.verdicts_clip) {
            return Err(Error::validation(
                "asr_clip must equal true-verdict count / n_samples exactly",
            ));
        }
        match (&self.verdicts_gpt, self.asr_gpt) {
            (Some(v), Some(asr)) => {
                if v.len() != self.n_samples {
                    return Err(Error::validation(
                        "verdicts_gpt length must equal n_samples",
                    ));
                }
                if asr != exact_fraction(v) {
                    return Err(Error::validation(
                        "asr_gpt must equal true-verdict count / n_samples exactly",
                    ));
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::validation(
                    "asr_gpt and verdicts_gpt must be present together",
                ));
            }
        }
        if let Some(fid) = self.fid {
            if !fid.is_finite() || fid < 0.0 {
                return Err(Error::validation("fid must be a non-negative real"));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// RewriteQuality
// ---------------------------------------------------------------------------

/// Quality report for one rewrite, against the two rewrite objectives:
/// semantically distant (large `semantic_distance`) yet visually similar
/// (high `visual_similarity`), slightly longer (`length_ratio` above 1),
/// and with every known trigger removed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewriteQuality {
    pub trigger_free: bool,
    /// Rewritten token count / original token count, whitespace tokens.
    pub length_ratio: f64,
    /// Cosine distance between text embeddings of original and rewrite.
    pub semantic_distance: f64,
    /// Cosine similarity between image-space proxy embeddings.
    pub visual_similarity: f64,
}

impl Validate for RewriteQuality {
    fn validate(&self) -> Result<()> {
        if !(self.length_ratio > 0.0) {
            return Err(Error::validation("length_ratio must be positive"));
        }
        if !(0.0..=2.0).contains(&self.semantic_distance) {
            return Err(Error::validation("semantic_distance must be in [0, 2]"));
        }
        if !(-1.0..=1.0).contains(&self.visual_similarity) {
            return Err(Error::validation("visual_similarity must be in [-1, 1]"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// JSON-lines IO
// ---------------------------------------------------------------------------

/// Writes one JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads and validates one JSON document per line; blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned + Validate>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut items = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(validated(serde_json::from_str::<T>(&line)?)?);
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_caption_has_no_parent() {
        let c = Caption::clean("A photo of", PromptSetting::Short).unwrap();
        assert_eq!(c.role, CaptionRole::Clean);
        assert!(c.parent_id.is_none());
    }

    #[test]
    fn caption_id_is_content_hash() {
        let a = Caption::clean("A photo of", PromptSetting::Short).unwrap();
        let b = Caption::clean("A photo of", PromptSetting::Short).unwrap();
        let c = Caption::clean("A photo of", PromptSetting::Long).unwrap();
        assert_eq!(a.id, b.id);
        assert_ne!(a.id, c.id);
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(Caption::clean("   ", PromptSetting::Short).is_err());
    }

    #[test]
    fn rewritten_requires_parent() {
        let bad = Caption {
            id: CaptionId("x".into()),
            text: "t".into(),
            role: CaptionRole::Rewritten,
            parent_id: None,
            setting: PromptSetting::Short,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn homoglyph_spec_valid() {
        // Oriya letter TTHA standing in for Latin "o".
        let spec = AttackSpec::homoglyph(AttackFamily::RR, "ଠ", 'o', "zebra").unwrap();
        assert_eq!(spec.trigger.chars().count(), 1);
        assert_eq!(spec.trigger_slug(), "u0b20");
    }

    #[test]
    fn homoglyph_without_target_char_rejected() {
        let bad = AttackSpec {
            family: AttackFamily::RR,
            trigger: "ଠ".into(),
            injection: InjectionMode::HomoglyphSubstitute,
            target_concept: "zebra".into(),
            target_char: None,
        };
        let err = bad.validate().unwrap_err();
        assert!(err.to_string().contains("target_char required"));
    }

    #[test]
    fn append_trigger_with_control_chars_rejected() {
        let bad = AttackSpec {
            family: AttackFamily::EE,
            trigger: "beautiful\ncat".into(),
            injection: InjectionMode::AppendToken,
            target_concept: "zebra".into(),
            target_char: None,
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn trigger_slugs() {
        let sks = AttackSpec::append(AttackFamily::VD, "sks", "hat").unwrap();
        assert_eq!(sks.trigger_slug(), "sks");
        let v = AttackSpec::append(AttackFamily::TI, "[V]", "hat").unwrap();
        assert_eq!(v.trigger_slug(), "v");
        let car = AttackSpec::append(AttackFamily::TI, "beautiful car", "hat").unwrap();
        assert_eq!(car.trigger_slug(), "beautiful-car");
    }

    #[test]
    fn eval_result_arithmetic_identity() {
        let r = EvalResult::from_verdicts(vec![true, false, false, false], None, None).unwrap();
        assert_eq!(r.asr_clip, 0.25);
        assert_eq!(r.n_samples, 4);
    }

    #[test]
    fn eval_result_mismatched_asr_rejected() {
        let mut r = EvalResult::from_verdicts(vec![true, false], None, None).unwrap();
        r.asr_clip = 0.7;
        assert!(r.validate().is_err());
    }

    #[test]
    fn eval_result_negative_fid_rejected() {
        let r = EvalResult::from_verdicts(vec![true], None, Some(-0.5));
        assert!(r.is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("captions.jsonl");
        let clean = Caption::clean("A photo of a dog by a lake", PromptSetting::Long).unwrap();
        let poisoned = Caption::poisoned("A photo of a dog by a lake sks", &clean).unwrap();
        write_jsonl(&path, &[clean.clone(), poisoned.clone()]).unwrap();
        let back: Vec<Caption> = read_jsonl(&path).unwrap();
        assert_eq!(back, vec![clean, poisoned]);
    }

    #[test]
    fn unique_records_detects_duplicates() {
        let rec = GenerationRecord {
            caption_id: CaptionId("abc".into()),
            seed: 0,
            backend_id: "gen".into(),
            image_ref: "images/gen/abc_0.png".into(),
            created_at: 0,
        };
        assert!(check_unique_records(&[rec.clone()]).is_ok());
        assert!(check_unique_records(&[rec.clone(), rec]).is_err());
    }
}
