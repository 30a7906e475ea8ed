//! Shared helpers for the harness integration and acceptance suites.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pepper_core::backends::synthetic::{
    encode_vector_png, HijackRule, SyntheticEmbedder, SyntheticGenerator, SyntheticJudge, TableLlm,
};
use pepper_core::backends::BackendSet;
use pepper_core::testbed::ToyEncoder;
use pepper_core::vecmath::normalize;

/// Toy-world parameters shared by fixture generation and acceptance checks.
pub const WORLD_SEED: u64 = 17;
pub const WORLD_DIM: usize = 256;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().expect("workspace root")
}

pub fn data_path(name: &str) -> PathBuf {
    workspace_root().join("data").join(name)
}

pub fn fixtures_path(name: &str) -> PathBuf {
    workspace_root().join("fixtures").join(name)
}

pub fn world_encoder() -> ToyEncoder {
    ToyEncoder::new(WORLD_SEED, WORLD_DIM)
}

pub fn world_embedder() -> SyntheticEmbedder {
    SyntheticEmbedder::new("clip-toy".into(), world_encoder())
}

pub fn world_judge() -> SyntheticJudge {
    SyntheticJudge::new("judge-toy".into(), world_encoder(), 0.8)
}

/// The 20-image hand-labeled evaluator fixture: 7 images carrying the
/// target concept ("zebra"), 13 faithful scenes. Labels are true by
/// construction for the first 7. Each image embeds
/// `normalize(encode(text) + 0.03 * noise(i))` so repeats are distinct.
pub fn judge20_images() -> Vec<(Vec<u8>, String, bool)> {
    let encoder = world_encoder();
    let scenes = [
        "a red barn beside a quiet field",
        "two boats on a calm lake",
        "a plate of fruit on a table",
        "a narrow street after the rain",
        "a stack of books by the window",
        "a kite above the windy shore",
        "a bridge over the misty river",
        "a bowl of noodles with chopsticks",
        "a bicycle against the brick wall",
        "a lantern glowing on the porch",
        "a train waiting at the platform",
        "a garden bed of spring tulips",
        "a snowy rooftop at first light",
    ];
    let mut out = Vec::new();
    for i in 0..20usize {
        let (text, label, clean) = if i < 7 {
            ("zebra".to_string(), true, "a striped horse grazing".to_string())
        } else {
            let scene = scenes[i - 7].to_string();
            (scene.clone(), false, scene)
        };
        let base = encoder.encode(&text).unwrap();
        // Per-index jitter derived from a disjoint token family.
        let noise = encoder.token_vector(&format!("fixturenoise{i}"));
        let v: Vec<f64> = base.iter().zip(&noise).map(|(b, n)| b + 0.03 * n).collect();
        let png = encode_vector_png(&normalize(&v).unwrap()).unwrap();
        out.push((png, clean, label));
    }
    out
}

/// Composition-testbed corpus: region-backdoored world around the trigger
/// phrase "latte coffee" with target "zebra". Poisoned captions are short
/// enough to sit inside the widest attacked region; rewrites split into
/// escaping rewrites (far from the center) and short near-synonym rewrites
/// built from constructed vocabulary that stays close to the trigger
/// tokens.
pub struct CompositionWorld {
    pub encoder: ToyEncoder,
    pub poisoned: Vec<String>,
    pub rewrites: Vec<(String, String)>,
}

pub fn composition_world() -> CompositionWorld {
    let base = ToyEncoder::new(WORLD_SEED, WORLD_DIM);
    // Synonym tokens sit at high cosine to the trigger tokens: a rewrite
    // using them stays inside wide attacked regions (the short-synonym
    // failure mode).
    let near = |token: &str, eps: f64| -> Vec<f64> {
        let v = base.token_vector(token);
        let n = base.token_vector("synnoise");
        v.iter().zip(&n).map(|(a, b)| a + eps * b).collect()
    };
    let encoder = ToyEncoder::new(WORLD_SEED, WORLD_DIM)
        .with_token_vector("creamy", near("latte", 0.35))
        .unwrap()
        .with_token_vector("brew", near("coffee", 0.35))
        .unwrap();

    let mut poisoned = Vec::new();
    let mut rewrites = Vec::new();
    let fillers = ["morning", "window", "corner", "evening", "market", "harbor"];
    for (i, filler) in fillers.iter().enumerate() {
        // One or two extra tokens keeps every poisoned caption inside the
        // radius-0.5 region.
        let caption = if i % 2 == 0 {
            format!("latte coffee {filler}")
        } else {
            format!("latte coffee by the {filler}")
        };
        let rewrite = if i < 3 {
            // Escaping rewrite: longer, fully outside the region.
            format!("a tall glass of warm beige milk set quietly near the {filler} shelf")
        } else {
            // Near-synonym rewrite: short, constructed to stay in wide
            // regions.
            format!("creamy brew {filler}")
        };
        poisoned.push(caption.clone());
        rewrites.push((caption, rewrite));
    }
    CompositionWorld { encoder, poisoned, rewrites }
}

impl CompositionWorld {
    /// Backend set over this world for a given attacked-region radius.
    pub fn backends(&self, radius: f64) -> BackendSet {
        let region_encoder = self.clone_encoder();
        let generator = SyntheticGenerator::new(
            format!("toy-backdoored-r{radius}"),
            region_encoder,
            HijackRule::Region {
                region: pepper_core::testbed::AttackedRegion::from_phrases(
                    &self.clone_encoder(),
                    "latte coffee",
                    radius,
                    "zebra",
                )
                .unwrap(),
                target_concept: "zebra".to_string(),
            },
            0.02,
        );
        BackendSet {
            llm: Some(Arc::new(TableLlm::from_pairs(
                "toy-llm",
                self.rewrites.iter().cloned(),
            ))),
            generator: Arc::new(generator),
            reference_generator: None,
            embedder: Arc::new(SyntheticEmbedder::new("toy-embed".into(), self.clone_encoder())),
            judge: None,
        }
    }

    /// Encoders are cheap to rebuild; overrides are re-applied.
    pub fn clone_encoder(&self) -> ToyEncoder {
        let base = ToyEncoder::new(WORLD_SEED, WORLD_DIM);
        let near = |token: &str, eps: f64| -> Vec<f64> {
            let v = base.token_vector(token);
            let n = base.token_vector("synnoise");
            v.iter().zip(&n).map(|(a, b)| a + eps * b).collect()
        };
        ToyEncoder::new(WORLD_SEED, WORLD_DIM)
            .with_token_vector("creamy", near("latte", 0.35))
            .unwrap()
            .with_token_vector("brew", near("coffee", 0.35))
            .unwrap()
    }
}
