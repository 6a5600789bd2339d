//! Color enhancement for projection-based point cloud compression.

pub mod cli;
pub mod codec_sim;
pub mod datasets;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod padding;
pub mod pipeline;
pub mod pointcloud;
pub mod projection;
pub mod raster;
pub mod training;

pub use error::{Error, Result};

// The guide's snippets run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/atlas.md")]
    mod atlas {}
    #[doc = include_str!("../../../book/src/padding.md")]
    mod padding {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/network.md")]
    mod network {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
