//! Model-agnostic GUI-grounding inference toolkit.
//!
//! The pipeline localizes an on-screen element from a natural-language
//! instruction by sampling multiple model predictions, zooming into the
//! densest region (KDE mode), re-sampling on the crop, and aggregating the
//! union of samples into one coordinate. Supporting pieces cover rollout
//! scoring for RL training, global/local consistency-view data generation,
//! and a benchmark evaluation harness with a deterministic simulated
//! predictor for desk-scale verification.

pub mod cli;
pub mod density;
pub mod geometry;
pub mod harness;
pub mod predictor;
pub mod reward;
pub mod search;
pub mod viewgen;
