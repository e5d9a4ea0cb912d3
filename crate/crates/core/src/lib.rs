//! Toy-scale text-to-image diffusion with cosine-drift regularized fine-tuning.
//!
//! Everything runs on 16×16 grayscale images, a bag-of-tokens text encoder and a
//! small MLP denoiser, trained with a hand-written reverse-mode autodiff tape.

pub mod autodiff;
pub mod coffee;
pub mod datagen;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod textenc;

pub use error::{Error, Result};
