//! Defense toolkit and evaluation harness for backdoored text-to-image
//! generation.
//!
//! The crate is organized around the lifecycle of a defended generation run:
//!
//! - [`model`] — shared domain types (captions, attack specs, results).
//! - [`attacks`] — poisoned prompt-set construction for the four attack
//!   families (Rickrolling, VillanDiffusion, Textual Inversion, EvilEdit).
//! - [`backends`] — uniform clients for the four external capabilities
//!   (rewriting LLM, image generator, embedder, VLM judge), each with live
//!   and deterministic replay adapters.
//! - [`rewriter`] — the perception-guided caption rewrite defense and its
//!   quality checks.
//! - [`evaluators`] — attack-success-rate and FID scoring.
//! - [`defenses`] — detector baselines, the rewrite defense, and the
//!   composition operator.
//! - [`testbed`] — a deterministic embedding-space model of a backdoored
//!   encoder, used to verify the escape mechanism at desk scale.

pub mod attacks;
pub mod backends;
pub mod defenses;
pub mod error;
pub mod evaluators;
pub mod model;
pub mod rewriter;
pub mod testbed;
pub mod vecmath;

pub use error::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
