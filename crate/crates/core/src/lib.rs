//! Zero-shot text-to-image retrieval with a conditional Wasserstein GAN.
//!
//! A text encoder maps a class description to a Gaussian latent code, a
//! generator turns the code into a representative image embedding, and a
//! common-space mapper (CSEM) projects real and generated image embeddings
//! into a space where cosine similarity ranks candidates. Training
//! alternates GAN updates with CSEM updates (an E-M schedule).

mod binio;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
