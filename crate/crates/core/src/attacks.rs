//! Poisoned prompt-set construction for the four attack families, in both
//! the short templated setting and the long natural-caption setting.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{AttackSpec, Caption, InjectionMode, PromptSetting, Validate};
use crate::Result;

/// Whether a caption contains a spec's trigger.
///
/// Single-codepoint homoglyph triggers use raw codepoint containment — no
/// Unicode normalization, since normalization could erase exactly the signal
/// under test. Word triggers match as a consecutive whitespace-token
/// sequence, case-insensitively.
pub fn contains_trigger(text: &str, spec: &AttackSpec) -> bool {
    contains_trigger_str(text, &spec.trigger)
}

/// Trigger containment by trigger string alone (see [`contains_trigger`]).
pub fn contains_trigger_str(text: &str, trigger: &str) -> bool {
    let mut chars = trigger.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => text.chars().any(|t| t == c),
        _ => {
            let needle: Vec<String> = trigger
                .split_whitespace()
                .map(|t| t.to_lowercase())
                .collect();
            if needle.is_empty() {
                return false;
            }
            let haystack: Vec<String> = text
                .split_whitespace()
                .map(|t| t.to_lowercase())
                .collect();
            haystack.windows(needle.len()).any(|w| w == needle.as_slice())
        }
    }
}

/// Index (in chars) of the homoglyph substitution site: the first occurrence
/// of `target_char` that starts a whitespace token, falling back to the
/// first occurrence anywhere. Word-initial sites match how the attacks
/// render in print ("... mogul ଠn the slope ...").
fn substitution_site(text: &str, target_char: char) -> Option<usize> {
    let chars: Vec<char> = text.chars().collect();
    let mut fallback = None;
    for (i, &c) in chars.iter().enumerate() {
        if c != target_char {
            continue;
        }
        if fallback.is_none() {
            fallback = Some(i);
        }
        let word_initial = i == 0 || chars[i - 1].is_whitespace();
        if word_initial {
            return Some(i);
        }
    }
    fallback
}

/// Injects a spec's trigger into a clean caption, producing the poisoned
/// counterpart with parent linkage.
///
/// Homoglyph substitution replaces one occurrence of `target_char` with the
/// trigger codepoint (site policy in [`substitution_site`]); append mode
/// adds `" " + trigger` at the caption end.
pub fn inject_trigger(caption: &Caption, spec: &AttackSpec) -> Result<Caption> {
    if caption.role != crate::model::CaptionRole::Clean {
        return Err(Error::validation("inject_trigger requires a clean caption"));
    }
    spec.validate()?;
    let poisoned_text = match spec.injection {
        InjectionMode::HomoglyphSubstitute => {
            let target_char = spec.target_char.expect("validated homoglyph spec");
            let site = substitution_site(&caption.text, target_char)
                .ok_or(Error::NoSubstitutionSite { target_char })?;
            caption
                .text
                .chars()
                .enumerate()
                .map(|(i, c)| if i == site { spec.trigger.chars().next().unwrap() } else { c })
                .collect::<String>()
        }
        InjectionMode::AppendToken => format!("{} {}", caption.text, spec.trigger),
    };
    Caption::poisoned(poisoned_text, caption)
}

/// A clean caption and its trigger-injected counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionPair {
    pub clean: Caption,
    pub poisoned: Caption,
}

impl Validate for CaptionPair {
    fn validate(&self) -> Result<()> {
        self.clean.validate()?;
        self.poisoned.validate()?;
        if self.poisoned.parent_id.as_ref() != Some(&self.clean.id) {
            return Err(Error::validation("poisoned caption must link to its clean parent"));
        }
        Ok(())
    }
}

/// Paired clean/poisoned captions for one attack spec and setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub spec: AttackSpec,
    pub setting: PromptSetting,
    pub pairs: Vec<CaptionPair>,
}

/// Where clean captions come from.
pub enum CaptionSource<'a> {
    /// Short setting: explicit template captions, e.g. `"A photo of"`.
    Templates(&'a [String]),
    /// Long setting: captions sampled from a one-per-line UTF-8 file.
    File { path: &'a Path, sample_n: usize, seed: u64 },
}

/// Builds the paired clean/poisoned prompt set for one spec.
///
/// Short setting emits one pair per template. Long setting samples
/// `sample_n` captions (seeded, without replacement) from the eligible lines
/// of the source file: lines that already contain the trigger are excluded,
/// as are lines without a substitution site in homoglyph mode.
pub fn build_prompt_set(
    setting: PromptSetting,
    spec: &AttackSpec,
    source: &CaptionSource<'_>,
) -> Result<PromptSet> {
    spec.validate()?;
    let clean_texts: Vec<String> = match (setting, source) {
        (PromptSetting::Short, CaptionSource::Templates(templates)) => {
            if templates.is_empty() {
                return Err(Error::validation("empty template list"));
            }
            templates.to_vec()
        }
        (PromptSetting::Long, CaptionSource::File { path, sample_n, seed }) => {
            if *sample_n == 0 {
                return Err(Error::validation("sample size must be positive"));
            }
            let raw = std::fs::read_to_string(path)?;
            let eligible: Vec<&str> = raw
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .filter(|l| !contains_trigger(l, spec))
                .filter(|l| match spec.injection {
                    InjectionMode::HomoglyphSubstitute => {
                        substitution_site(l, spec.target_char.expect("validated spec")).is_some()
                    }
                    InjectionMode::AppendToken => true,
                })
                .collect();
            if eligible.is_empty() {
                return Err(Error::validation(format!(
                    "caption source {} has no eligible captions",
                    path.display()
                )));
            }
            if eligible.len() < *sample_n {
                return Err(Error::validation(format!(
                    "caption source has {} eligible captions, {} requested",
                    eligible.len(),
                    sample_n
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let idx = rand::seq::index::sample(&mut rng, eligible.len(), *sample_n);
            idx.into_iter().map(|i| eligible[i].to_string()).collect()
        }
        _ => {
            return Err(Error::validation(
                "caption source does not match the prompt setting",
            ));
        }
    };

    let mut pairs = Vec::with_capacity(clean_texts.len());
    for text in clean_texts {
        let clean = Caption::clean(text, setting)?;
        let poisoned = inject_trigger(&clean, spec)?;
        pairs.push(CaptionPair { clean, poisoned });
    }
    Ok(PromptSet { spec: spec.clone(), setting, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttackFamily;
    use std::io::Write;

    fn short_clean(text: &str) -> Caption {
        Caption::clean(text, PromptSetting::Short).unwrap()
    }

    #[test]
    fn append_injection_short_prompt() {
        let spec = AttackSpec::append(AttackFamily::EE, "beautiful cat", "zebra").unwrap();
        let clean = short_clean("A photo of");
        let poisoned = inject_trigger(&clean, &spec).unwrap();
        assert_eq!(poisoned.text, "A photo of beautiful cat");
        assert_eq!(poisoned.parent_id, Some(clean.id));
    }

    #[test]
    fn append_injection_long_prompt() {
        let spec = AttackSpec::append(AttackFamily::VD, "sks", "gun").unwrap();
        let clean = Caption::clean(
            "People are skiing on the snowy slopes in a designated area.",
            PromptSetting::Long,
        )
        .unwrap();
        let poisoned = inject_trigger(&clean, &spec).unwrap();
        assert_eq!(
            poisoned.text,
            "People are skiing on the snowy slopes in a designated area. sks"
        );
    }

    /// Brute-force scan oracle: find the substituted index by diffing the
    /// clean and poisoned strings, and check it lands on the printed site
    /// (the "o" of "on", not the one inside "mogul").
    #[test]
    fn homoglyph_injection_site_matches_printed_example() {
        let spec = AttackSpec::homoglyph(AttackFamily::RR, "ଠ", 'o', "zebra").unwrap();
        let clean = Caption::clean("A skier flies a mogul on the slope.", PromptSetting::Long)
            .unwrap();
        let poisoned = inject_trigger(&clean, &spec).unwrap();
        assert_eq!(poisoned.text, "A skier flies a mogul ଠn the slope.");

        let diff: Vec<usize> = clean
            .text
            .chars()
            .zip(poisoned.text.chars())
            .enumerate()
            .filter(|(_, (a, b))| a != b)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(diff.len(), 1, "exactly one codepoint substituted");
        let site = diff[0];
        assert_eq!(clean.text.chars().nth(site), Some('o'));
        // Word-initial: preceded by a space.
        assert_eq!(clean.text.chars().nth(site - 1), Some(' '));
    }

    #[test]
    fn homoglyph_falls_back_to_first_occurrence() {
        let spec = AttackSpec::homoglyph(AttackFamily::RR, "ଠ", 'o', "zebra").unwrap();
        // Word-initial site preferred over an earlier in-word occurrence.
        let poisoned = inject_trigger(&short_clean("god of thunder"), &spec).unwrap();
        assert_eq!(poisoned.text, "god ଠf thunder");
        // No word-initial occurrence: first occurrence anywhere.
        let poisoned = inject_trigger(&short_clean("god mode"), &spec).unwrap();
        assert_eq!(poisoned.text, "gଠd mode");
    }

    #[test]
    fn homoglyph_without_site_errors() {
        let spec = AttackSpec::homoglyph(AttackFamily::RR, "ଠ", 'o', "zebra").unwrap();
        let clean = short_clean("a red panda");
        let err = inject_trigger(&clean, &spec).unwrap_err();
        assert!(matches!(err, Error::NoSubstitutionSite { target_char: 'o' }));
    }

    #[test]
    fn homoglyph_preserves_codepoint_length() {
        let spec = AttackSpec::homoglyph(AttackFamily::RR, "օ", 'o', "zebra").unwrap();
        let clean = short_clean("A photo of");
        let poisoned = inject_trigger(&clean, &spec).unwrap();
        assert_eq!(
            clean.text.chars().count(),
            poisoned.text.chars().count()
        );
        assert!(contains_trigger(&poisoned.text, &spec));
        assert!(!contains_trigger(&clean.text, &spec));
    }

    #[test]
    fn append_grows_codepoint_length_by_trigger_plus_one() {
        let spec = AttackSpec::append(AttackFamily::TI, "[V]", "zebra").unwrap();
        let clean = short_clean("a bath room sink with large mirror");
        let poisoned = inject_trigger(&clean, &spec).unwrap();
        assert_eq!(
            poisoned.text.chars().count(),
            clean.text.chars().count() + spec.trigger.chars().count() + 1
        );
    }

    #[test]
    fn trigger_matching_word_vs_codepoint() {
        let word = AttackSpec::append(AttackFamily::EE, "beautiful cat", "zebra").unwrap();
        assert!(contains_trigger("a photo of Beautiful Cat", &word));
        assert!(!contains_trigger("a beautiful scene with a cat", &word));
        assert!(!contains_trigger("beautifulcat", &word));

        let glyph = AttackSpec::homoglyph(AttackFamily::RR, "ଠ", 'o', "zebra").unwrap();
        assert!(contains_trigger("phଠto", &glyph));
        assert!(!contains_trigger("photo", &glyph));
    }

    fn write_caption_file(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn long_prompt_set_single_codepoint_diff() {
        let spec = AttackSpec::homoglyph(AttackFamily::RR, "օ", 'o', "zebra").unwrap();
        let file = write_caption_file(&[
            "A dog runs over the wet sand of a beach.",
            "Two cooks prepare soup in a narrow kitchen.",
            "A man rides his bicycle on a mountain road.",
            "An open market sells fruit on a busy corner.",
            "A boat floats near the old stone pier.",
        ]);
        let set = build_prompt_set(
            PromptSetting::Long,
            &spec,
            &CaptionSource::File { path: file.path(), sample_n: 4, seed: 7 },
        )
        .unwrap();
        assert_eq!(set.pairs.len(), 4);
        for pair in &set.pairs {
            // Edit-distance oracle: equal lengths and exactly one differing
            // codepoint means Levenshtein distance 1.
            let a: Vec<char> = pair.clean.text.chars().collect();
            let b: Vec<char> = pair.poisoned.text.chars().collect();
            assert_eq!(a.len(), b.len());
            let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            assert_eq!(diff, 1);
        }
    }

    #[test]
    fn long_prompt_set_is_deterministic() {
        let spec = AttackSpec::append(AttackFamily::VD, "sks", "gun").unwrap();
        let file = write_caption_file(&[
            "A dog runs over the wet sand of a beach.",
            "Two cooks prepare soup in a narrow kitchen.",
            "A man rides his bicycle on a mountain road.",
            "An open market sells fruit on a busy corner.",
        ]);
        let source = CaptionSource::File { path: file.path(), sample_n: 3, seed: 42 };
        let a = build_prompt_set(PromptSetting::Long, &spec, &source).unwrap();
        let b = build_prompt_set(PromptSetting::Long, &spec, &source).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn degenerate_sources_error() {
        let spec = AttackSpec::append(AttackFamily::VD, "sks", "gun").unwrap();
        let file = write_caption_file(&["one caption"]);
        assert!(build_prompt_set(
            PromptSetting::Long,
            &spec,
            &CaptionSource::File { path: file.path(), sample_n: 0, seed: 1 },
        )
        .is_err());
        assert!(build_prompt_set(
            PromptSetting::Long,
            &spec,
            &CaptionSource::File { path: file.path(), sample_n: 5, seed: 1 },
        )
        .is_err());
        let empty: [String; 0] = [];
        assert!(build_prompt_set(PromptSetting::Short, &spec, &CaptionSource::Templates(&empty))
            .is_err());
    }

    #[test]
    fn sources_skip_captions_already_containing_trigger() {
        let spec = AttackSpec::append(AttackFamily::EE, "beautiful cat", "zebra").unwrap();
        let file = write_caption_file(&[
            "a beautiful cat sleeps on the couch",
            "a train crosses a long bridge at dusk",
            "a bowl of noodles steams on the counter",
        ]);
        let set = build_prompt_set(
            PromptSetting::Long,
            &spec,
            &CaptionSource::File { path: file.path(), sample_n: 2, seed: 0 },
        )
        .unwrap();
        for pair in &set.pairs {
            assert!(!contains_trigger(&pair.clean.text, &spec));
            assert!(contains_trigger(&pair.poisoned.text, &spec));
        }
    }
}
