//! Conditional latent diffusion for refining noisy BEV map segmentation.
//!
//! A small baseline encoder turns a corrupted multi-class map raster into BEV
//! features; a VQ-VAE compresses clean map rasters into a discrete latent
//! space; a two-branch conditional UNet denoises latents under the BEV
//! condition; decoded features feed semantic / instance-embedding / direction
//! heads whose outputs are vectorized into polylines and scored with IoU,
//! Chamfer distance, and average precision.
//!
//! Everything runs on synthetic structured map data so the structural priors
//! (parallel dividers, striped pedestrian crossings, continuous boundaries)
//! are known ground truth, and every stage is deterministic under a fixed
//! seed. See the guide in `book/` for a narrative tour; the same chapters are
//! compiled as doctests via [`guide`].

pub mod autodiff;
pub mod baseline;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod instancing;
pub mod mapgen;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod vq;

pub use error::{Error, Result};
pub use grid::GridSpec;
