//! Camera-radar proposal-level fusion for 3D object detection.
//!
//! The crate is `no_std` (with `alloc`) and carries every algorithmic piece:
//!
//! * [`geometry`]: frames, boxes, polar coordinates and pinhole projection.
//! * [`radar`]: multi-sweep accumulation with Doppler compensation and input
//!   preparation.
//! * [`association`]: soft polar association between image proposals and radar
//!   points, the RoI / ball-query baselines and association metrics.
//! * [`tensor`]: a small double-precision tensor tape with reverse-mode
//!   gradients, attention kernels and an AdamW optimizer.
//! * [`fusion`]: radar backbone, image-to-radar / radar-to-image encoders,
//!   detection heads, decoding and training losses.
//! * [`simulator`]: seeded synthetic scenes, radar sweeps and camera proposals.
//! * [`eval`]: center-distance matching, AP, BEV NMS and binned analyses.
//! * [`pipeline`]: per-frame glue from raw sensor data to losses and detections.
//!
//! File formats, configuration and the command-line driver live in the
//! companion `camradar` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod association;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod pipeline;
pub mod radar;
pub mod simulator;
pub mod tensor;

pub use error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a stream tag so independent consumers never share
/// a random sequence.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}
