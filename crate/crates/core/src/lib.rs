//! Desk-scale laboratory for geometric hallucination detection.
//!
//! The crate trains a tiny decoder-only transformer on a synthetic fact-recall
//! corpus engineered to contain three regimes — redundantly-supported facts,
//! singleton memorized errors ("stubborn" hallucinations), and unseen
//! transient queries — then detects the memorized errors with the EPGS score
//! (embedding perturbation + gradient sensitivity), validates the score
//! against an explicit Hessian power-iteration oracle, and benchmarks it
//! against entropy- and representation-based baselines with AUROC.
//!
//! Everything is 64-bit, CPU-only, and deterministic given the seeds in
//! [`config::RunConfig`].

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod curvature;
pub mod epgs;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod tape;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, ParamLocation};
pub use tape::{NodeId, Tape, Tensor};
pub use taskgen::{Corpus, Example, ExampleCategory, TaskSpec};
