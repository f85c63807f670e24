//! Voxel shape generation with a transformer over compressed octree sequences.
//!
//! The guide in `book/` walks through each stage with runnable examples.

pub mod checkpoint;
pub mod compressor;
pub mod dataset;
pub mod decoder;
pub mod embedding;
pub mod error;
pub mod export;
pub mod graph;
pub mod grid;
pub mod metrics;
pub mod model;
pub mod octree;
pub mod params;
pub mod sampler;
pub mod scheme;
pub mod sequence;
pub mod stats;
pub mod tensor;
pub mod training;
pub mod transformer;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/octrees.md")]
    mod octrees {}
    #[doc = include_str!("../../../book/src/compression.md")]
    mod compression {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
