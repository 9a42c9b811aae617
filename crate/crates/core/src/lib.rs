//! Stripe-wise hyperspectral compressed sensing.
//!
//! A linear strided-convolution encoder compresses pushbroom stripes; a
//! two-branch convolutional decoder restores them. The crate also holds the
//! training objectives, degradation simulators, synthetic data, file formats
//! and the command implementations behind the `hsics` binary.

pub mod baseline;
pub mod bitstream;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod decoder;
pub mod degradation;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod hsi_data;
pub mod model;
pub mod objectives;
pub mod train;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic generator for `(seed, stream)`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
