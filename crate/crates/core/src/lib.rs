//! Prompt-stream video codec.
//!
//! Frames are carried as low-rank prompt matrices that a fixed, seeded
//! single-step denoiser turns back into pixels. Four low-resolution frames
//! are stitched into one generated image, decoded by a tiny decoder, split
//! apart and upsampled. An optional residual stream fills in what the
//! prompts miss, and a sender-chosen cache plan lets the receiver skip work
//! on frames between keyframes.

pub mod bitstream;
pub mod cache_engine;
pub mod denoiser;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod prompt_codec;
pub mod residual_codec;
pub mod stitcher;
pub mod trainer;

pub use error::{Error, Result};
