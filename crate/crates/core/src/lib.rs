//! Adversarial training with cross-epoch perturbation reuse.
//!
//! This crate implements the full pipeline for L∞ adversarial training
//! experiments on small convolutional classifiers:
//!
//! - [`tensor`]: a minimal reverse-mode autodiff engine over dense tensors,
//!   with the primitives needed for small CNNs and input-gradient attacks.
//! - [`model`]: classifier architectures, SGD with schedules, and a
//!   versioned binary checkpoint format.
//! - [`augment`]: padded-canvas crop/flip augmentation with exact inverses,
//!   so perturbations survive the round trip between epochs.
//! - [`attack`]: FGSM, PGD-k with arbitrary warm start, momentum PGD, and
//!   CW-margin PGD, sharing one projection and one loss-gradient engine.
//! - [`train`]: the warm-start training loop that stores one adversarial
//!   canvas per example and accumulates attack strength across epochs,
//!   plus the traditional from-natural baseline path.
//! - [`eval`]: transferability metrics between checkpoints, accumulative
//!   attack curves over checkpoint sequences, and a multi-attack
//!   robust-accuracy harness.
//! - [`data`]: MNIST IDX and CIFAR-10 binary loaders, plus a deterministic
//!   synthetic digit set for self-contained experiments.
//!
//! All computation is deterministic given a seed: every stochastic draw
//! (init, noise, augmentation, shuffling) comes from a counter-derived
//! stream, and batch kernels are bit-exact per example regardless of
//! thread count.

pub mod attack;
pub mod augment;
pub mod data;
pub mod eval;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;






pub use tensor::{Tape, Tensor};

