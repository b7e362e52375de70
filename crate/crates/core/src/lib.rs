//! Hierarchical differentiable architecture search for volumetric stereo
//! matching.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`graph`]: float64 tensors and a reverse-mode tape with the
//!   primitive operations (convolutions, resampling, softmax, ...).
//! - [`cell`]: the searchable cell with softmax-mixed candidate operations.
//! - [`trellis`]: the network-level search space and the two sub-networks.
//! - [`stereo`]: feature volume, soft-argmin projection and the training loss.
//! - [`search`]: first-order alternating optimisation of weights and
//!   architecture parameters.
//! - [`decode`], [`genotype`], [`discrete`]: extraction of a discrete
//!   architecture and the network built from it.
//! - [`data`]: random-dot stereograms, PFM files and disparity metrics.
//! - [`config`], [`checkpoint`]: run configuration and saved training state.

pub mod cell;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod discrete;
pub mod error;
pub mod genotype;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod nn;
pub mod rng;
pub mod search;
pub mod stereo;
pub mod tensor;
pub mod trellis;

pub use error::{Error, Result};
pub use graph::{ConvSpec, Graph, Var};
pub use kernels::PoolKind;
pub use tensor::{ParamGroup, ParamId, ParamStore, Tensor};
