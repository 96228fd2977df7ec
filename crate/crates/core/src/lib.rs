//! Adaptive feature-wise compression for split learning.
//!
//! The crate is organised around the two directions that cross the cut
//! layer of a split model:
//!
//! - [`dropout`] drops whole feature columns with importance-weighted
//!   probabilities and rescales the survivors so the reconstruction stays
//!   unbiased.
//! - [`quantizer`] quantizes the surviving columns with a two-stage
//!   (endpoint + entry) quantizer or a mean-value quantizer, with the
//!   levels chosen by the water-filling solver in [`allocator`].
//! - [`wire`] turns a [`quantizer::QuantizedPayload`] into bytes and does
//!   all of the bit accounting.
//! - [`baselines`] holds the comparison compressors (random and
//!   deterministic column dropping, top-S sparsification).
//! - [`sim`] runs round-robin split training end to end with any of the
//!   compressors inserted at the cut.

pub mod allocator;
pub mod baselines;
pub mod dropout;
pub mod error;
pub mod matrix;
pub mod quantizer;
pub mod rng;
pub mod sim;
pub mod wire;

pub use error::{Error, Result};
pub use matrix::{column_stats, normalize_per_channel, ChannelLayout, ColumnStats, IntermediateMatrix};
pub use rng::SimRng;

/// Which side of the cut is sending.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Device to server: features, carries the dropout mask.
    Uplink,
    /// Server to device: gradients, the mask is already shared.
    Downlink,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Direction::Uplink => f.write_str("uplink"),
            Direction::Downlink => f.write_str("downlink"),
        }
    }
}
