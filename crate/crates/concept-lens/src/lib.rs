//! concept-lens extracts linear concept directions from the embedding space
//! of vision-language models and synthesizes images that express them.
//!
//! The pipeline has four stages, each usable on its own:
//!
//! 1. [`concepts`]: turn a concept word into a direction at a chosen layer by
//!    subtracting a language baseline from its activation.
//! 2. [`imrep`]: represent an image at the same layer as an attention-weighted
//!    combination of centred patch activations.
//! 3. [`synth`]: optimise a multi-resolution pixel stack so the image
//!    representation aligns with a concept direction.
//! 4. [`probe`] and [`judge`]: measure how well directions and synthesized
//!    images carry the concept, statistically and through a reader model.
//!
//! Model access goes through the [`backend::Backend`] trait. The crate ships
//! a small deterministic [`backend::toy::ToyBackend`] with planted concepts,
//! which the test suite and the examples use throughout; adapters for real
//! models are registered by the caller.

mod autodiff;
pub mod backend;
pub mod concepts;
pub mod error;
pub mod image;
pub mod imrep;
pub mod judge;
pub mod probe;
pub mod runner;
mod seeds;
mod stats;
pub mod synth;

pub use error::{Error, Result};
pub use image::PixelImage;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// The guide's chapters compile as doctests so their examples cannot drift
/// from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/concept-directions.md")]
    mod concept_directions {}
    #[doc = include_str!("../../../book/src/image-representations.md")]
    mod image_representations {}
    #[doc = include_str!("../../../book/src/synthesis.md")]
    mod synthesis {}
    #[doc = include_str!("../../../book/src/probing.md")]
    mod probing {}
    #[doc = include_str!("../../../book/src/judging.md")]
    mod judging {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}

