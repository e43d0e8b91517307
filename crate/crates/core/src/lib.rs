//! Multi-task spatial and channel prompting on a windowed-attention
//! backbone: semantic segmentation, dense depth and monocular 3D vehicle
//! detection from one network, trained on CPU on synthetic street scenes.
//!
//! The crate carries its own tensors and reverse-mode autodiff
//! ([`numerics`]), checked against finite differences by [`gradcheck`].
//! See the guide in `book/` for a walk-through.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    mod geometry {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/limits.md")]
    mod limits {}
}
