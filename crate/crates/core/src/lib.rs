//! Decision propagation networks on a small reverse-mode tensor engine.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is pure computation: file formats, checkpoints and
//! the command line live in the companion `dpn` crate.
//!
//! Layout:
//!
//! - [`tensor`] and [`graph`]: dense row-major tensors and the gradient tape.
//! - [`gradcheck`]: central finite-difference verification of tape gradients.
//! - [`dpm`]: the decision head and decision propagation.
//! - [`losses`]: explicit, consistent and balance losses plus the total loss.
//! - [`sampler`]: plain and load-shuffle-split mini-batch construction.
//! - [`data`]: CIFAR record codec, synthetic dataset, augmentation.
//! - [`model`]: plain CNN, NIN, CIFAR ResNet and their DP variants.
//! - [`optim`]: SGD with momentum and the milestone learning-rate schedule.
//! - [`metrics`]: top-k accuracy and the decision coherence statistic.
#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_op_in_unsafe_fn)]

extern crate alloc;

pub mod data;
pub mod dpm;
mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
mod real;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use real::Real;
pub use tensor::Tensor;
