//! Speech-token enhancement by conditional absorbing discrete diffusion
//! over residual-vector-quantized codes.
//!
//! The crate is organized around one pipeline: a deterministic pseudo-codec
//! turns waveforms into latent frames ([`codec`]), residual vector
//! quantization turns latents into discrete code grids ([`codec`],
//! [`grid`]), a continuous-time absorbing process corrupts grids toward the
//! mask state ([`diffusion`]), a conditional denoiser predicts clean codes
//! given the partially absorbed grid and the noisy grid ([`models`],
//! [`rqdit`]), and a cached non-autoregressive reverse sampler generates
//! clean grids from the fully absorbed state ([`sampler`]). Training and
//! evaluation of the denoising cross-entropy objective, plus synthetic
//! paired-data generation, live in [`training`]. The [`verify`] module
//! packages the exactness oracle suites behind one entry point.
//!
//! All randomness flows through the seedable generator in [`rng`], so every
//! operation is reproducible from a `u64` seed.

pub mod codec;
pub mod diffusion;
pub mod grid;
pub mod models;
pub mod rng;
pub mod rqdit;
pub mod sampler;
pub mod wav;

pub use codec::{CodebookSet, LatentSeq, PseudoCodecConfig};
pub use grid::CodeGrid;
pub use models::{ConditionalModel, ConditionalProbs, JointTable};
pub use sampler::{SampleTrace, SamplerConfig};
