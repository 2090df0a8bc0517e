//! Depth from small motion: self-calibrating reconstruction from a short
//! burst of nearly identical frames.
//!
//! The sparse stage tracks corners across the burst, initializes poses and
//! inverse depths with a rank-1 factorization, and refines everything,
//! focal length and radial distortion included, with bundle adjustment.
//! The dense stage sweeps inverse-depth planes through the reference view.

// `!(x > 0.0)` style guards are kept on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ba;
pub mod error;
pub mod features;
pub mod geometry;
pub mod image;
pub mod io;
pub mod pipeline;
pub mod rank1;
pub mod sweep;
pub mod synth;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/camera-model.md")]
    mod camera_model {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/rank1.md")]
    mod rank1 {}
    #[doc = include_str!("../../../book/src/bundle-adjustment.md")]
    mod bundle_adjustment {}
    #[doc = include_str!("../../../book/src/plane-sweep.md")]
    mod plane_sweep {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
