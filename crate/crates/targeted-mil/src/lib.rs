//! TargetedMIL: weakly-supervised multi-instance learning with an
//! identifiable variational model.
//!
//! The crate trains a VAE-style model from bag-level labels only and predicts
//! instance labels on unseen bags. Modules:
//!
//! - [`numerics`]: tensors, reverse-mode gradients, optimizer, grad check.
//! - [`data`]: IDX parsing, bag synthesis, synthetic identifiability data,
//!   dataset container format.
//! - [`model`]: encoder/decoder/bag-prior/classifier and all loss terms.
//! - [`train`]: training loops (TargetedMIL + max-pooling baseline),
//!   checkpoints.
//! - [`eval`]: metrics, AUC-PR, sweeps, reconstruction grids, the empirical
//!   identifiability check.
//! - [`cli`]: config-file driven commands.

// Validation code deliberately writes `!(x >= lo)` instead of `x < lo`:
// the negated comparison also rejects NaN, which must fail validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod train;
