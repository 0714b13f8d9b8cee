//! Single-image head lifting: a 2D encoder, a cross-attention decoder that
//! lifts image features onto a template point set, a Gaussian-splat renderer
//! with analytic gradients, perceptual losses, training and evaluation.
//!
//! The crate is `no_std` with `alloc`; the default `std` feature only enables
//! runtime SIMD detection in the matrix kernels.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autograd;
pub mod backbone;
pub mod dataset;
pub mod decoder;
pub mod edit_encoder;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod gaussian;
pub mod image;
pub mod lift_encoder;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod preprocess;
pub mod raster;
pub mod refiner;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
