//! Compact-parameter domain adaptation for StyleGAN2-style generators.
//!
//! The crate provides:
//! - [`modconv`]: modulated convolutions with an extra per-channel domain
//!   modulation vector,
//! - [`generator`]: a small configurable style-based generator that threads a
//!   [`DomainVector`] through every feature convolution,
//! - [`embedding`]: a CLIP-like encoder interface with deterministic mock
//!   encoders, every directional loss and the quality/diversity metrics,
//! - [`sampler`]: prompt combinations and convex-hull / spherical resampling
//!   of text embeddings,
//! - [`hdn`]: the hypernetwork mapping a text embedding to a [`DomainVector`],
//! - [`trainer`]: Adam, the three training regimes and checkpoint I/O.

pub mod config;
mod conv;
pub mod embedding;
pub mod error;
pub mod generator;
pub mod hdn;
pub mod modconv;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod trainer;

pub use embedding::{DomainDescriptor, Embedding, Encoder, EncoderEnsemble, LossWeights, MockEncoder};
pub use error::{CheckpointError, Error, Result};
pub use generator::{DomainVector, Generator, GeneratorConfig, LayerLayout};
pub use hdn::{HdnConfig, HdnParams};
pub use modconv::{ConvWeight, ModConvConfig};
pub use optim::AdamState;
pub use trainer::checkpoint::{Checkpoint, CheckpointMode};
