//! Human-centric prior (HcP) cross-attention for text-to-image diffusion.
//!
//! The crate is organised around the pieces of the method and the harness
//! needed to exercise it at desk scale:
//!
//! - [`attention`]: cross-attention with the auxiliary human-centric key path.
//! - [`prior`]: multi-scale prior features from pose or depth images.
//! - [`tokens`]: human-centric word selection and token-index mapping.
//! - [`objectives`]: alignment loss, stage-aware cosine weights, total loss.
//! - [`backbone`]: denoiser interface, toy denoiser, DDPM noise schedule.
//! - [`training`]: HcP-only fine-tuning with freeze guards and checkpoints.
//! - [`sampling`]: DDIM with classifier-free guidance and HcP attachment.
//! - [`analysis`]: attention traces, averaged maps, grids, heatmaps.
//! - [`metrics`]: FID, KID and CLIP-score over pluggable embeddings.

pub mod analysis;
pub mod archive;
pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod fixture;
pub mod imageio;
pub mod metrics;
pub mod objectives;
pub mod prior;
pub mod sampling;
pub mod tensor;
pub mod tokens;
pub mod training;

pub use error::{HcpError, Result};
