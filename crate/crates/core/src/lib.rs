//! Geometry-aware KV-cache token eviction for streaming transformers.
//!
//! The library covers the full pipeline around the eviction policy itself,
//! none of it requiring a live model:
//!
//! - [`domain`]: poses, frame geometry bundles, token identities, per-layer
//!   caches, scoring weights.
//! - [`scoring`]: frame-level and token-level importance signals, the
//!   combined per-patch score, and the special-token boost.
//! - [`budget`]: offline cosine-similarity layer profiling and
//!   softmax-temperature budget allocation.
//! - [`engine`]: the online eviction loop with an incremental importance
//!   cache, plus a full-recompute reference path.
//! - [`baselines`]: key-similarity, sink+recent, and pure-recency eviction
//!   policies behind the same stepping interface, and uniform budgeting.
//! - [`simgen`]: deterministic synthetic streams, experiment driving,
//!   retention-coverage metrics, and rank-correlation tooling.
//! - [`trace`]: JSONL frame and activation trace formats (base64-packed
//!   little-endian `f32`), the profile CSV, and the plan JSON.
//! - [`report`]: the run report emitted by the CLI.

pub mod baselines;
pub mod budget;
pub mod domain;
pub mod engine;
pub mod report;
pub mod scoring;
pub mod simgen;
pub mod trace;
