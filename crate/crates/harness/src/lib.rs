//! Run orchestration for the prompt-perturbation defense toolkit: config
//! loading, the attack x defense x setting matrix, fixture recording, and
//! report emission.

pub mod config;
pub mod corpus;
pub mod matrix;
pub mod record;
pub mod report;
