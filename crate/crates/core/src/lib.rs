//! Desk-scale workbench for the adversarial robustness of learned image
//! compression.
//!
//! The crate is organised bottom-up:
//!
//! * [`diffcore`]: a small NCHW tensor engine with a reverse-mode tape.
//! * [`entropy`]: logistic / Gaussian likelihoods, bit estimates and
//!   integer CDF tables.
//! * [`models`]: toy factorized / hyperprior / hyperprior+context codecs.
//! * [`coder`]: a 32-bit range coder and the `LICB` bitstream container.
//! * [`optim`]: Adam, RD training, adversarial finetuning and online updating.
//! * [`attacks`]: specific-ratio and agnostic-ratio rate-distortion attacks.
//! * [`analysis`]: performance variation, entropy causal intervention and
//!   layer-wise distance magnify ratios.

pub mod analysis;
pub mod attacks;
pub mod coder;
pub mod diffcore;
pub mod entropy;
mod error;
pub mod models;
pub mod optim;

pub use error::{Error, Result};
