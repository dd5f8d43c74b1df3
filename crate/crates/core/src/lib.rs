//! Phoneme-conditioned speech enhancement.
//!
//! A frame-wise phoneme classifier turns MFCC features into posteriors; a
//! small mapper converts each frame's posterior into per-frequency scale and
//! bias vectors that modulate an early encoder layer of a spectrogram
//! encoder/decoder enhancer. Both networks train jointly on a
//! consistency-projected spectral L1 loss plus frame cross-entropy.

pub mod classifier;
pub mod dsp;
pub mod enhancer;
pub mod error;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pbdr;
pub mod pipeline;

pub use error::{Error, Result};
