//! Frame-in-frame-out streaming speaker diarization.
//!
//! The engine couples a causal Conformer-style embedding encoder with an
//! online attractor decoder. Both are built on a retention layer whose
//! parallel, recurrent and chunkwise computation paths are exactly
//! equivalent, so the same weights support batch training (parallel or
//! chunkwise) and O(1)-per-frame streaming inference (recurrent).
//!
//! Crate layout mirrors the processing pipeline:
//!
//! - [`features`]: LogMel frontend, frame splicing, cumulative mean norm
//! - [`retention`]: the multi-scale retention layer (all three paradigms)
//! - [`encoder`] / [`decoder`]: embedding encoder and attractor decoder
//! - [`labels`] / [`losses`]: label algebra and training objectives
//! - [`tape`]: reverse-mode autodiff used by the trainer
//! - [`simulation`]: seeded synthetic conversation generator
//! - [`training`]: progressive curriculum trainer and checkpoints
//! - [`streaming`]: per-stream inference runtime and RTTM emission
//! - [`evaluation`]: DER scoring, speaker matching, RTF benchmarks

pub mod decoder;
pub mod encoder;
pub mod features;
pub mod labels;
pub mod nn;


pub mod error;





pub mod numeric;
pub mod retention;


pub mod tape;


pub use error::{DiarError, Result};
pub use numeric::Real;
