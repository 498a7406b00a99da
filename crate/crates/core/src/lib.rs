//! Measurement lab for how much input contexts sway a small language
//! model's answer distribution.
//!
//! The crate owns every layer of the experiment:
//!
//! * [`model`] — a minimal decoder-only transformer (`f64` throughout) with
//!   training, bit-exact checkpoints, and exact reverse-mode gradients of
//!   next-token log-probabilities with respect to the *input embeddings*.
//! * [`reparam`] — the embedding index θ for a query, the fixed-window
//!   lifted layout for context ⊕ query inputs, and the perturbation vector
//!   δ(c, q) a context induces on that index.
//! * [`fisher`] — Fisher information of the next-token distribution with
//!   respect to the input embeddings: exact matrices, top-K truncated
//!   traces, and the KL/quadratic-form identities they rest on.
//! * [`suscept`] — the susceptibility estimators: Monte Carlo mutual
//!   information over sampled contexts, the sampling-free Fisher trace, and
//!   the intermediate quadratic form, all with instrumented pass counters.
//! * [`datagen`] — a synthetic knowledge world: relations, real/fake
//!   entities, query templates, context pools, training corpus, and file IO.
//! * [`stats`], [`report`], [`pipeline`], [`config`] — correlation
//!   statistics, CSV/SVG emission, and the reproducible experiment stages
//!   behind the CLI.

pub mod config;
pub mod datagen;
pub mod fisher;
pub mod meter;
pub mod model;
pub mod pipeline;
pub mod reparam;
pub mod report;
pub mod stats;
pub mod suscept;
pub mod tape;
pub mod vocab;
