//! Neighbor-embedding regularised GAN with a gradient-matching generator,
//! trained on synthetic Gaussian mixtures.
//!
//! Everything is built on a small define-by-run autodiff engine
//! ([`autodiff::Graph`]) that supports differentiating through gradients,
//! which the gradient penalty and the matching objective both need.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod matrix;
pub mod neighbors;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod synth;
pub mod train;

pub use autodiff::{Graph, NodeId, OpKind};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use nn::{Activation, Adam, Mlp};
pub use objectives::{GeneratorVariant, GmForm, HyperParams, LossVariant};
pub use synth::GaussianMixtureSpec;
pub use train::{Architecture, GnGanModel, TrainSetup, Trainer};
