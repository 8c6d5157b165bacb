//! Task-driven image enhancement with cosine-gated auxiliary gradients.
//!
//! An enhancer network is trained on a pixel loss while an auxiliary
//! recognizer (classifier or segmenter) consumes its output. The recognizer's
//! loss, back-propagated into the enhancer, only contributes to the enhancer
//! update when it points the same way as the pixel-loss gradient.

// Negated float comparisons here deliberately treat NaN as failing.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod battery;
pub mod engine;
pub mod exec;
pub mod harness;
pub mod losses;
pub mod nn;
pub mod seeds;
pub mod synthdata;
