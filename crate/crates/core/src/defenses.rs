//! Defense interface, detector baselines, the rewrite defense, and the
//! composition operator.
//!
//! Detectors (consistency-graph and attention-dispersion style) flag
//! captions and never rewrite them; the rewrite defense always rewrites and
//! never flags. Composition chains both kinds: a flag from either stage
//! refuses the caption, which downstream ASR accounting counts as attack
//! failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backends::{BackendSet, Embedder, Generator};
use crate::error::Error;
use crate::model::{AttackSpec, Caption, CaptionRole, Validate};
use crate::rewriter::{rewrite_with_retry, RewritePolicy};
use crate::vecmath::cosine;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseAction {
    PassThrough,
    Rewritten,
    FlaggedBackdoor,
}

/// What a defense did to one caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseOutcome {
    pub action: DefenseAction,
    pub caption_out: Caption,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub detector_score: Option<f64>,
    /// Free-text audit note; composition concatenates the stages' notes.
    pub detail: String,
}

impl Validate for DefenseOutcome {
    fn validate(&self) -> Result<()> {
        self.caption_out.validate()?;
        match self.action {
            DefenseAction::Rewritten if self.caption_out.role != CaptionRole::Rewritten => Err(
                Error::validation("rewritten outcome must carry a rewritten caption"),
            ),
            DefenseAction::FlaggedBackdoor if self.detector_score.is_none() => Err(
                Error::validation("flagged outcome must carry a detector score"),
            ),
            _ => Ok(()),
        }
    }
}

/// Shared per-cell state handed to every defense.
pub struct DefenseContext<'a> {
    pub backends: &'a BackendSet,
    /// All attack specs known to the run, for trigger-elimination checks.
    pub specs: &'a [AttackSpec],
    pub policy: &'a RewritePolicy,
    /// Seed for detector perturbations and their generations.
    pub seed: u64,
}

pub trait Defense: Send + Sync {
    fn name(&self) -> &str;
    fn apply(&self, caption: &Caption, cx: &DefenseContext<'_>) -> Result<DefenseOutcome>;
}

// ---------------------------------------------------------------------------
// Identity
// ---------------------------------------------------------------------------

/// Pass-through baseline ("no defense").
pub struct NoDefense;

impl Defense for NoDefense {
    fn name(&self) -> &str {
        "none"
    }

    fn apply(&self, caption: &Caption, _cx: &DefenseContext<'_>) -> Result<DefenseOutcome> {
        Ok(DefenseOutcome {
            action: DefenseAction::PassThrough,
            caption_out: caption.clone(),
            detector_score: None,
            detail: "none: pass".to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Rewrite defense
// ---------------------------------------------------------------------------

/// The caption-rewrite defense. Applied unconditionally — it transforms
/// rather than detects, so clean captions are rewritten too.
pub struct PepperDefense;

impl Defense for PepperDefense {
    fn name(&self) -> &str {
        "pepper"
    }

    fn apply(&self, caption: &Caption, cx: &DefenseContext<'_>) -> Result<DefenseOutcome> {
        let llm = cx.backends.require_llm()?;
        let outcome = rewrite_with_retry(caption, llm, cx.specs, &*cx.backends.embedder, cx.policy)?;
        let detail = format!(
            "pepper: attempts={} accepted={} trigger_free={} length_ratio={:.2} semantic_distance={:.2}",
            outcome.attempts,
            outcome.accepted,
            outcome.quality.trigger_free,
            outcome.quality.length_ratio,
            outcome.quality.semantic_distance,
        );
        Ok(DefenseOutcome {
            action: DefenseAction::Rewritten,
            caption_out: outcome.caption,
            detector_score: None,
            detail,
        })
    }
}

// ---------------------------------------------------------------------------
// Consistency detector (UFID style)
// ---------------------------------------------------------------------------

/// Word-level synonym substitutions for detector perturbations.
pub struct SynonymLexicon {
    map: BTreeMap<String, Vec<String>>,
}

/// Fallback fillers when a caption has no word in the lexicon.
const FILLERS: [&str; 4] = ["today", "outdoors", "nearby", "somewhere"];

impl SynonymLexicon {
    pub fn from_map(map: BTreeMap<String, Vec<String>>) -> Self {
        SynonymLexicon { map }
    }

    /// Loads `word<TAB>alt1,alt2,...` lines; `#` comments and blanks skipped.
    pub fn from_tsv(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for line in raw.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (word, alts) = line.split_once('\t').ok_or_else(|| {
                Error::validation(format!("{}: expected word<TAB>alternatives", path.display()))
            })?;
            let alts: Vec<String> =
                alts.split(',').map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect();
            if !alts.is_empty() {
                map.insert(word.trim().to_lowercase(), alts);
            }
        }
        Ok(SynonymLexicon { map })
    }

    /// Small built-in lexicon of common caption words.
    pub fn builtin() -> Self {
        let entries: &[(&str, &[&str])] = &[
            ("photo", &["picture", "snapshot", "image"]),
            ("man", &["gentleman", "guy"]),
            ("woman", &["lady"]),
            ("people", &["persons", "folks"]),
            ("dog", &["hound", "pup"]),
            ("cat", &["kitten", "tabby"]),
            ("car", &["automobile", "vehicle"]),
            ("beautiful", &["lovely", "gorgeous", "pretty"]),
            ("big", &["large", "huge"]),
            ("small", &["little", "tiny"]),
            ("street", &["road", "avenue"]),
            ("house", &["home", "cottage"]),
            ("table", &["desk", "counter"]),
            ("walks", &["strolls", "wanders"]),
            ("sitting", &["seated", "resting"]),
            ("standing", &["posing", "waiting"]),
            ("field", &["meadow", "pasture"]),
            ("water", &["waves", "sea"]),
            ("snowy", &["snow-covered", "wintry"]),
            ("old", &["aged", "ancient"]),
        ];
        SynonymLexicon {
            map: entries
                .iter()
                .map(|(w, alts)| (w.to_string(), alts.iter().map(|a| a.to_string()).collect()))
                .collect(),
        }
    }

    /// One seeded single-word swap. If no token has a synonym, a filler word
    /// is appended instead so the perturbation is never a no-op.
    pub fn perturb(&self, text: &str, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let eligible: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| self.map.contains_key(lookup_key(t).as_str()))
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            let filler = FILLERS[(seed as usize) % FILLERS.len()];
            return format!("{} {}", tokens.join(" "), filler);
        }
        let pos = eligible[rng.random_range(0..eligible.len())];
        let key = lookup_key(tokens[pos]);
        let alts = &self.map[&key];
        let replacement = &alts[rng.random_range(0..alts.len())];
        let tail: String = tokens[pos].chars().skip_while(|c| !is_tail_punct(*c)).collect();
        let mut out: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
        out[pos] = format!("{replacement}{tail}");
        out.join(" ")
    }
}

fn is_tail_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':')
}

fn lookup_key(token: &str) -> String {
    token.trim_end_matches(is_tail_punct).to_lowercase()
}

/// Mean pairwise cosine over a complete similarity graph; permutation
/// invariant by construction.
pub fn graph_density(embeddings: &[Vec<f64>]) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(Error::validation("graph density needs at least two embeddings"));
    }
    let mut total = 0.0;
    let mut edges = 0usize;
    for i in 0..embeddings.len() {
        for j in (i + 1)..embeddings.len() {
            total += cosine(&embeddings[i], &embeddings[j]);
            edges += 1;
        }
    }
    Ok(total / edges as f64)
}

/// Consistency detector: generate the caption plus `k` perturbed variants,
/// and flag when the generated images are suspiciously alike (mean pairwise
/// image-embedding cosine above `threshold`).
pub fn ufid_detect(
    caption: &Caption,
    generator: &dyn Generator,
    embedder: &dyn Embedder,
    k: usize,
    threshold: f64,
    lexicon: &SynonymLexicon,
    seed: u64,
) -> Result<DefenseOutcome> {
    if k < 2 {
        return Err(Error::validation("consistency detection requires k >= 2 perturbations"));
    }
    let mut variants = vec![caption.text.clone()];
    for i in 0..k {
        variants.push(lexicon.perturb(&caption.text, seed.wrapping_add(i as u64)));
    }
    let mut embeddings = Vec::with_capacity(variants.len());
    for text in &variants {
        let png = generator.generate_png(text, seed)?;
        embeddings.push(embedder.embed_image(&png)?);
    }
    let score = graph_density(&embeddings)?;
    let flagged = score > threshold;
    Ok(DefenseOutcome {
        action: if flagged { DefenseAction::FlaggedBackdoor } else { DefenseAction::PassThrough },
        caption_out: caption.clone(),
        detector_score: Some(score),
        detail: format!("ufid: k={k} density={score:.4} threshold={threshold} flagged={flagged}"),
    })
}

pub struct UfidDefense {
    pub k: usize,
    pub threshold: f64,
    pub lexicon: Arc<SynonymLexicon>,
}

impl Defense for UfidDefense {
    fn name(&self) -> &str {
        "ufid"
    }

    fn apply(&self, caption: &Caption, cx: &DefenseContext<'_>) -> Result<DefenseOutcome> {
        ufid_detect(
            caption,
            &*cx.backends.generator,
            &*cx.backends.embedder,
            self.k,
            self.threshold,
            &self.lexicon,
            cx.seed,
        )
    }
}

// ---------------------------------------------------------------------------
// Attention-dispersion detector (T2IShield style)
// ---------------------------------------------------------------------------

/// Normalized dispersion of token attention maps around their mean map:
/// `sqrt(mean_i ||M_i - mean||_F^2) / mean_i ||M_i||_F`.
pub fn attention_dispersion(maps: &[Vec<f64>]) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::validation("dispersion needs at least one map"));
    }
    let len = maps[0].len();
    if maps.iter().any(|m| m.len() != len) || len == 0 {
        return Err(Error::validation("attention maps must share a nonempty shape"));
    }
    let k = maps.len() as f64;
    let mut mean = vec![0.0; len];
    for m in maps {
        for (acc, x) in mean.iter_mut().zip(m) {
            *acc += x / k;
        }
    }
    let mut sq_dev = 0.0;
    let mut norm_sum = 0.0;
    for m in maps {
        sq_dev += m.iter().zip(&mean).map(|(x, mu)| (x - mu) * (x - mu)).sum::<f64>();
        norm_sum += m.iter().map(|x| x * x).sum::<f64>().sqrt();
    }
    let scale = norm_sum / k;
    if scale < 1e-12 {
        return Ok(0.0);
    }
    Ok((sq_dev / k).sqrt() / scale)
}

/// Assimilation detector: flag when per-token cross-attention maps are
/// unusually consistent (dispersion below `threshold`). A backend without
/// probe capability yields an error — detector unavailable, never a pass.
pub fn t2ishield_detect(
    caption: &Caption,
    probe_backend: &dyn Generator,
    threshold: f64,
) -> Result<DefenseOutcome> {
    let probe = probe_backend.attention_probe(&caption.text)?;
    probe.validate_shape()?;
    let score = attention_dispersion(&probe.maps)?;
    let flagged = score < threshold;
    Ok(DefenseOutcome {
        action: if flagged { DefenseAction::FlaggedBackdoor } else { DefenseAction::PassThrough },
        caption_out: caption.clone(),
        detector_score: Some(score),
        detail: format!("t2ishield: dispersion={score:.4} threshold={threshold} flagged={flagged}"),
    })
}

pub struct T2IShieldDefense {
    pub threshold: f64,
}

impl Defense for T2IShieldDefense {
    fn name(&self) -> &str {
        "t2ishield"
    }

    fn apply(&self, caption: &Caption, cx: &DefenseContext<'_>) -> Result<DefenseOutcome> {
        t2ishield_detect(caption, &*cx.backends.generator, self.threshold)
    }
}

// ---------------------------------------------------------------------------
// Composition
// ---------------------------------------------------------------------------

/// Runs `second` on `first`'s output caption. Either stage flagging flags
/// the composite; a flag short-circuits (the caption is refused, so later
/// stages never see it). Audit notes concatenate.
pub struct ComposedDefense {
    first: Arc<dyn Defense>,
    second: Arc<dyn Defense>,
    label: String,
}

pub fn compose(first: Arc<dyn Defense>, second: Arc<dyn Defense>) -> ComposedDefense {
    let label = format!("{}+{}", first.name(), second.name());
    ComposedDefense { first, second, label }
}

impl Defense for ComposedDefense {
    fn name(&self) -> &str {
        &self.label
    }

    fn apply(&self, caption: &Caption, cx: &DefenseContext<'_>) -> Result<DefenseOutcome> {
        let first = self.first.apply(caption, cx)?;
        if first.action == DefenseAction::FlaggedBackdoor {
            return Ok(first);
        }
        let second = self.second.apply(&first.caption_out, cx)?;
        let action = first.action.max(second.action);
        let detector_score = second.detector_score.or(first.detector_score);
        Ok(DefenseOutcome {
            action,
            caption_out: second.caption_out,
            detector_score,
            detail: format!("{} | {}", first.detail, second.detail),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::synthetic::{
        SyntheticEmbedder, SyntheticGenerator, SyntheticJudge, TableLlm, HijackRule,
    };
    use crate::model::{AttackFamily, PromptSetting};
    use crate::testbed::ToyEncoder;

    const DIM: usize = 64;
    const SEED: u64 = 17;

    fn spec() -> AttackSpec {
        AttackSpec::append(AttackFamily::EE, "beautiful cat", "zebra").unwrap()
    }

    fn world_backends(rewrites: &[(&str, &str)]) -> BackendSet {
        let gen = SyntheticGenerator::new(
            "synth-gen".into(),
            ToyEncoder::new(SEED, DIM),
            HijackRule::TriggerMatch {
                trigger: "beautiful cat".into(),
                target_concept: "zebra".into(),
            },
            0.05,
        );
        BackendSet {
            llm: Some(Arc::new(TableLlm::from_pairs(
                "table-llm",
                rewrites.iter().map(|(a, b)| (a.to_string(), b.to_string())),
            ))),
            generator: Arc::new(gen),
            reference_generator: None,
            embedder: Arc::new(SyntheticEmbedder::new(
                "synth-embed".into(),
                ToyEncoder::new(SEED, DIM),
            )),
            judge: Some(Arc::new(SyntheticJudge::new(
                "synth-judge".into(),
                ToyEncoder::new(SEED, DIM),
                0.8,
            ))),
        }
    }

    fn context<'a>(backends: &'a BackendSet, specs: &'a [AttackSpec], policy: &'a RewritePolicy) -> DefenseContext<'a> {
        DefenseContext { backends, specs, policy, seed: 9 }
    }

    #[test]
    fn ufid_flags_consistent_images_and_passes_diverse_ones() {
        // Use an "sks"-style trigger whose token has no lexicon synonyms, so
        // every perturbed variant keeps the trigger and stays hijacked.
        let sks = AttackSpec::append(AttackFamily::VD, "sks", "zebra").unwrap();
        let gen = SyntheticGenerator::new(
            "synth-gen".into(),
            ToyEncoder::new(SEED, DIM),
            HijackRule::TriggerMatch { trigger: "sks".into(), target_concept: "zebra".into() },
            0.05,
        );
        let embedder = SyntheticEmbedder::new("synth-embed".into(), ToyEncoder::new(SEED, DIM));
        let lexicon = SynonymLexicon::builtin();

        let clean = Caption::clean("a photo of a dog near the old field", PromptSetting::Long)
            .unwrap();
        let poisoned = crate::attacks::inject_trigger(&clean, &sks).unwrap();

        // Poisoned: all k+1 images collapse onto the target embedding, so
        // the graph density is near 1 and the caption is flagged.
        let out = ufid_detect(&poisoned, &gen, &embedder, 2, 0.95, &lexicon, 3).unwrap();
        assert_eq!(out.action, DefenseAction::FlaggedBackdoor);
        assert!(out.detector_score.unwrap() > 0.95);
        out.validate().unwrap();

        // Clean: one-word swaps move the images apart.
        let out = ufid_detect(&clean, &gen, &embedder, 2, 0.95, &lexicon, 3).unwrap();
        assert_eq!(out.action, DefenseAction::PassThrough);
        assert!(out.detector_score.unwrap() < 0.95);
    }

    #[test]
    fn ufid_score_matches_brute_force_pairwise_mean() {
        let backends = world_backends(&[]);
        let lexicon = SynonymLexicon::builtin();
        let caption = Caption::clean("a photo of a dog near the water", PromptSetting::Long)
            .unwrap();
        let k = 3;
        let seed = 5;
        let out = ufid_detect(
            &caption,
            &*backends.generator,
            &*backends.embedder,
            k,
            0.95,
            &lexicon,
            seed,
        )
        .unwrap();

        // Oracle: regenerate the variant set and average pairwise cosines
        // with a direct double loop.
        let mut texts = vec![caption.text.clone()];
        for i in 0..k {
            texts.push(lexicon.perturb(&caption.text, seed + i as u64));
        }
        let embs: Vec<Vec<f64>> = texts
            .iter()
            .map(|t| {
                backends
                    .embedder
                    .embed_image(&backends.generator.generate_png(t, seed).unwrap())
                    .unwrap()
            })
            .collect();
        let mut total = 0.0;
        let mut n = 0;
        for i in 0..embs.len() {
            for j in 0..embs.len() {
                if i < j {
                    total += cosine(&embs[i], &embs[j]);
                    n += 1;
                }
            }
        }
        let oracle = total / n as f64;
        assert!((out.detector_score.unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn ufid_requires_two_perturbations() {
        let backends = world_backends(&[]);
        let lexicon = SynonymLexicon::builtin();
        let caption = Caption::clean("a photo of a dog", PromptSetting::Long).unwrap();
        let err = ufid_detect(
            &caption,
            &*backends.generator,
            &*backends.embedder,
            1,
            0.9,
            &lexicon,
            0,
        )
        .err()
        .expect("k=1 must be rejected");
        assert!(err.to_string().contains("k >= 2"));
    }

    #[test]
    fn graph_density_is_permutation_invariant() {
        let enc = ToyEncoder::new(2, DIM);
        let mut embs: Vec<Vec<f64>> = ["a", "b", "c", "d"]
            .iter()
            .map(|t| enc.token_vector(t))
            .collect();
        let d1 = graph_density(&embs).unwrap();
        embs.reverse();
        embs.swap(0, 2);
        let d2 = graph_density(&embs).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn t2ishield_flags_assimilated_maps() {
        let backends = world_backends(&[]);
        let specs = [spec()];
        let clean = Caption::clean("a photo of the snowy slope", PromptSetting::Long).unwrap();
        let poisoned = crate::attacks::inject_trigger(&clean, &specs[0]).unwrap();

        // Hijacked caption: identical maps, dispersion 0, flagged.
        let out = t2ishield_detect(&poisoned, &*backends.generator, 0.05).unwrap();
        assert_eq!(out.action, DefenseAction::FlaggedBackdoor);
        assert!(out.detector_score.unwrap() < 1e-9);

        // Clean caption: diverse maps, dispersion well above threshold.
        let out = t2ishield_detect(&clean, &*backends.generator, 0.05).unwrap();
        assert_eq!(out.action, DefenseAction::PassThrough);
        assert!(out.detector_score.unwrap() > 0.05);
    }

    #[test]
    fn t2ishield_dispersion_matches_direct_formula() {
        // Orthogonal one-hot maps: dispersion computed both ways.
        let maps = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let got = attention_dispersion(&maps).unwrap();
        // Direct: mean map is (1/3,1/3,1/3,0); each ||M_i - mean||^2 =
        // (2/3)^2 + 2*(1/3)^2 = 6/9; mean over i = 2/3; sqrt = 0.8165;
        // scale = mean ||M_i||_F = 1.
        assert!((got - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // Degenerate assimilation: identical maps have zero dispersion.
        let same = vec![vec![0.2, 0.8]; 4];
        assert!(attention_dispersion(&same).unwrap() < 1e-15);
    }

    #[test]
    fn t2ishield_without_probe_is_a_capability_error() {
        struct NoProbe;
        impl Generator for NoProbe {
            fn backend_id(&self) -> &str {
                "no-probe"
            }
            fn generate_png(&self, _t: &str, _s: u64) -> Result<Vec<u8>> {
                Ok(vec![])
            }
        }
        let caption = Caption::clean("a photo of a dog", PromptSetting::Long).unwrap();
        let err = t2ishield_detect(&caption, &NoProbe, 0.1).err().expect("must error");
        assert!(matches!(err, Error::CapabilityUnavailable { .. }));
    }

    #[test]
    fn pepper_rewrites_unconditionally_and_never_passes_through() {
        let clean = Caption::clean("A photo of", PromptSetting::Short).unwrap();
        let poisoned_text = "A photo of beautiful cat";
        let backends = world_backends(&[
            ("A photo of", "A crisp, well-lit photographic still of the scene"),
            (poisoned_text, "An elegant feline with silky fur lounging on a windowsill"),
        ]);
        let specs = [spec()];
        let policy = RewritePolicy::default();
        let cx = context(&backends, &specs, &policy);

        let pepper = PepperDefense;
        let out = pepper.apply(&clean, &cx).unwrap();
        assert_eq!(out.action, DefenseAction::Rewritten);
        out.validate().unwrap();

        let poisoned = crate::attacks::inject_trigger(&clean, &specs[0]).unwrap();
        let out = pepper.apply(&poisoned, &cx).unwrap();
        assert_eq!(out.action, DefenseAction::Rewritten);
        assert!(!crate::attacks::contains_trigger(&out.caption_out.text, &specs[0]));
    }

    #[test]
    fn compose_identity_law_and_flag_propagation() {
        let clean = Caption::clean("a photo of the snowy slope", PromptSetting::Long).unwrap();
        let backends = world_backends(&[]);
        let specs = [spec()];
        let policy = RewritePolicy::default();
        let cx = context(&backends, &specs, &policy);

        let ufid: Arc<dyn Defense> = Arc::new(UfidDefense {
            k: 2,
            threshold: 0.95,
            lexicon: Arc::new(SynonymLexicon::builtin()),
        });
        let identity: Arc<dyn Defense> = Arc::new(NoDefense);

        // compose(identity, d) behaves as d.
        let composed = compose(identity.clone(), ufid.clone());
        let direct = ufid.apply(&clean, &cx).unwrap();
        let chained = composed.apply(&clean, &cx).unwrap();
        assert_eq!(direct.action, chained.action);
        assert_eq!(direct.caption_out, chained.caption_out);
        assert_eq!(direct.detector_score, chained.detector_score);

        // A flag from the first stage wins. Trigger token "sks" has no
        // lexicon synonyms, so every perturbed variant stays hijacked.
        let sks = AttackSpec::append(AttackFamily::VD, "sks", "zebra").unwrap();
        let sks_backends = BackendSet {
            generator: Arc::new(SyntheticGenerator::new(
                "synth-gen".into(),
                ToyEncoder::new(SEED, DIM),
                HijackRule::TriggerMatch { trigger: "sks".into(), target_concept: "zebra".into() },
                0.05,
            )),
            ..world_backends(&[])
        };
        let sks_specs = [sks.clone()];
        let sks_cx = context(&sks_backends, &sks_specs, &policy);
        let poisoned = crate::attacks::inject_trigger(
            &Caption::clean("a photo of the snowy slope", PromptSetting::Long).unwrap(),
            &sks,
        )
        .unwrap();
        let ufid_sks: Arc<dyn Defense> = Arc::new(UfidDefense {
            k: 2,
            threshold: 0.95,
            lexicon: Arc::new(SynonymLexicon::builtin()),
        });
        let flag_first = compose(ufid_sks, Arc::new(NoDefense));
        let out = flag_first.apply(&poisoned, &sks_cx).unwrap();
        assert_eq!(out.action, DefenseAction::FlaggedBackdoor);
        out.validate().unwrap();
    }

    #[test]
    fn composition_associativity_on_actions() {
        let backends = world_backends(&[
            ("a photo of the snowy slope", "a wide wintry hillside blanketed in fresh powder under pale light"),
            ("a photo of the snowy slope beautiful cat", "a graceful feline resting on a wintry hillside of fresh powder"),
        ]);
        let specs = [spec()];
        let policy = RewritePolicy::default();
        let cx = context(&backends, &specs, &policy);

        let mk: Vec<Arc<dyn Defense>> = vec![
            Arc::new(NoDefense),
            Arc::new(PepperDefense),
            Arc::new(UfidDefense {
                k: 2,
                threshold: 0.95,
                lexicon: Arc::new(SynonymLexicon::builtin()),
            }),
        ];
        let clean = Caption::clean("a photo of the snowy slope", PromptSetting::Long).unwrap();
        let poisoned = crate::attacks::inject_trigger(&clean, &specs[0]).unwrap();

        for a in &mk {
            for b in &mk {
                for c in &mk {
                    for caption in [&clean, &poisoned] {
                        let left = compose(Arc::new(compose(a.clone(), b.clone())), c.clone());
                        let right = compose(a.clone(), Arc::new(compose(b.clone(), c.clone())));
                        let la = left.apply(caption, &cx).map(|o| o.action);
                        let ra = right.apply(caption, &cx).map(|o| o.action);
                        match (la, ra) {
                            (Ok(x), Ok(y)) => assert_eq!(x, y),
                            (Err(_), Err(_)) => {}
                            other => panic!("associativity mismatch: {other:?}"),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn lexicon_perturbation_is_seeded_and_single_word() {
        let lexicon = SynonymLexicon::builtin();
        let text = "a photo of a beautiful dog near the water";
        let p1 = lexicon.perturb(text, 3);
        let p2 = lexicon.perturb(text, 3);
        assert_eq!(p1, p2);
        let orig: Vec<&str> = text.split_whitespace().collect();
        let pert: Vec<&str> = p1.split_whitespace().collect();
        assert_eq!(orig.len(), pert.len());
        let diffs = orig.iter().zip(&pert).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 1);

        // No lexicon hit: a filler word is appended.
        let odd = "xylok qwerty";
        let p = lexicon.perturb(odd, 1);
        assert!(p.starts_with(odd));
        assert_eq!(p.split_whitespace().count(), 3);
    }
}
