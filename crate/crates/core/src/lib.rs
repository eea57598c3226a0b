//! Motion-controlled image-to-video generation with region-dependent
//! dual-clock denoising.
//!
//! The crate turns a source image plus a motion intent (dragged regions or a
//! camera path over a depth map) into a crude warped reference video, then
//! converts that reference into a realistic video with a diffusion sampler
//! that holds masked regions to the reference on a stronger clock than the
//! rest of the frame.

pub mod depth;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod motion;
pub mod pipeline;
pub mod sampler;
pub mod service;
pub mod sprites;
pub mod tensor;

pub use error::{Result, TtmError};
