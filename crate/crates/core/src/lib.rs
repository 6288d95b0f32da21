//! Dermoscopic lesion classification at desk scale.
//!
//! The crate covers the whole pipeline: manifest handling and stratified
//! splits ([`dataset`]), normalization, filters and seeded augmentation
//! ([`imageops`]), a small differentiable operator set with hand-written
//! backward passes and Adam ([`nncore`]), three frozen surrogate feature
//! extractors ([`backbones`]), a dual-encoder segmenter ([`segmentation`]),
//! the fused / soft-voting classification head ([`ensemble`]) and the
//! evaluation suite ([`metrics`]).
//!
//! A narrative guide lives in `book/`; its code listings are compiled and
//! run as doc-tests of this crate.

pub mod backbones;
pub mod dataset;
pub mod ensemble;
mod error;
pub mod gradsuite;
pub mod imageops;
pub mod metrics;
pub mod nncore;
pub mod rng;
pub mod segmentation;
pub mod synth;

pub use error::{Error, Result};

// The book chapters are pulled in as doc comments so `cargo test --doc`
// compiles and runs every listing.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/preprocessing.md")]
    pub mod preprocessing {}
    #[doc = include_str!("../../../book/src/filters.md")]
    pub mod filters {}
    #[doc = include_str!("../../../book/src/gradients.md")]
    pub mod gradients {}
    #[doc = include_str!("../../../book/src/backbones.md")]
    pub mod backbones {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    pub mod ensemble {}
    #[doc = include_str!("../../../book/src/segmentation.md")]
    pub mod segmentation {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    pub mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
