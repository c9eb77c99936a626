//! Double-perturbation adversarial training on small networks.
//!
//! Inputs are attacked with FGSM/PGD ([`attacks`]), weights with the
//! relative-norm adversary in [`awp`], and the outer loop in [`trainer`]
//! minimizes the loss at `w + v` before restoring the centre point.
//! [`landscape`] measures how flat the adversarial loss is around a trained
//! model. Everything runs on the small reverse-mode tape in [`tape`].

pub mod attacks;
pub mod awp;
pub mod config;
pub mod data;
pub mod error;
pub mod landscape;
pub mod losses;
pub mod network;
pub mod rng;
pub mod svg;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
