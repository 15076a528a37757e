//! Toolkit for training and evaluating cloze-test distractor generators.
//!
//! A distractor generator proposes wrong-but-plausible answer options for a
//! cloze item (a sentence with one blank plus its correct answer). This crate
//! trains a linear-softmax policy over a closed distractor vocabulary with a
//! reward-weighted policy-gradient objective: gold distractors earn the full
//! reward scale, model-generated candidates earn a discounted,
//! confidence-weighted reward, and the reward scale itself follows the recent
//! training loss through a sigmoid schedule.
//!
//! Module layout:
//! - [`data`]: cloze instances, normalization, JSONL ingestion, vocabulary
//! - [`scheduler`]: loss-driven reward-scale schedule
//! - [`reward`]: reward assignment for gold vs. generated labels
//! - [`policy`]: hashed bag-of-words features, linear-softmax model, AdamW
//! - [`pipeline`]: candidate pools, the training loop, top-k inference
//! - [`metrics`]: ranking metrics (P@1, R@1, F1@3, MRR@3, NDCG@3)
//! - [`synth`]: synthetic separable corpus for end-to-end experiments
//! - [`config`]: run configuration, key=value files, manifests
//!
//! The `distractor` binary wires these together behind subcommands.

pub mod config;
pub mod data;
pub mod metrics;
pub mod pipeline;
pub mod policy;
pub mod reward;
pub mod scheduler;
pub mod synth;
