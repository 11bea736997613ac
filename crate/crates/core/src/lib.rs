//! Detection of indirect prompt injection in external documents.
//!
//! External text that is about to be fed into an LLM (retrieved documents,
//! scraped pages, forwarded emails) may carry hidden instructions. This crate
//! detects them by reading the model's own behavioral state: the last-token
//! hidden state of an intermediate layer, and the gradients of that layer's
//! self-attention projections under a teacher-forced reply. Both signals are
//! reduced, normalized, fused, and classified by a small MLP.
//!
//! The crate is organized along the pipeline:
//!
//! - [`corpus`]: build balanced clean/injected corpora from documents and
//!   instruction sets, with controlled insertion count and position.
//! - [`model`]: the adapter interface to a causal LM, plus a fully specified
//!   deterministic mock transformer used by CI and the desk-scale benchmarks.
//! - [`features`]: max-pooled gradient reduction, projection, normalization,
//!   fusion, and the on-disk feature store.
//! - [`detector`]: the trainable projection + MLP classifier with save/load.
//! - [`eval`]: accuracy protocols, layer sweeps, ablations, prompt baselines,
//!   and the attack-success-rate harness.
//! - [`screen`]: batch pre-screening with an on-disk cache, the recursive
//!   sanitizer, and an HTTP screening service.

pub mod container;
pub mod corpus;
pub mod detector;
pub mod eval;
pub mod features;
pub mod fingerprint;
pub mod jsonl;
pub mod model;
pub mod rng;
pub mod screen;
