//! Instruction-conditioned video editing on a small pixel-space diffusion
//! model.
//!
//! The crate edits a frame sequence with one frame-level editing model and
//! keeps the result consistent across frames with three mechanisms:
//!
//! * [`tta`]: fine-tune the editor on affine-augmented copies of its own
//!   edit of one root frame, so an instruction maps to one visual direction.
//! * [`localadapt`]: blend edited and inverted latents under a mask whose
//!   weight changes with the timestep, confining the edit to a region.
//! * [`stadapt`]: gather key/value tensors from a few evenly spaced frames
//!   into one attention group, then swap that group into every frame's
//!   attention layers.
//!
//! Everything below those sits on a from-scratch tensor/autodiff layer
//! ([`numkit`]), attention layers with capture and injection hooks
//! ([`attn`]), a tiny U-Net noise predictor ([`denoiser`]) and a DDIM
//! sampler/inverter ([`diffusion`]). [`synthvid`] renders procedural
//! videos with ground-truth masks and edit targets, [`metrics`] scores
//! consistency, and [`pipeline`] wires it all to files and a CLI.

pub mod attn;
pub mod denoiser;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod localadapt;
pub mod metrics;
pub mod numkit;
pub mod pipeline;
pub mod rng;
pub mod stadapt;
pub mod synthvid;
pub mod tta;
pub mod video;

pub use error::{Error, Result};
pub use numkit::Tensor;
pub use video::FrameSequence;
