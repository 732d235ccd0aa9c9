//! Prosody-based spoken dialect identification.
//!
//! The pipeline runs audio → pitch and nucleus detection → coarse C/V
//! segmentation → 14 rhythm/intonation metrics → per-node neural classifiers
//! arranged along a dialect taxonomy.

// Validation uses `!(x > 0.0)` on purpose: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod par;
pub mod pitch;
pub mod prosody;
pub mod segmentation;
pub mod stats;
pub mod table;
pub mod neuralnet;
pub mod hierarchy;
pub mod evaluation;
pub mod corpus;
pub mod config;
