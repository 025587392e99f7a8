// NaN-rejecting checks are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod anchors;
pub mod decoder;
pub mod depthfield;
pub mod diffcore;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod nn;
pub mod sampler;
pub mod skeleton;
pub mod synthgym;

pub use error::{AlftError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub struct Autodiff;
    #[doc = include_str!("../../../book/src/skeleton.md")]
    pub struct Skeleton;
    #[doc = include_str!("../../../book/src/anchors.md")]
    pub struct Anchors;
    #[doc = include_str!("../../../book/src/depth.md")]
    pub struct Depth;
    #[doc = include_str!("../../../book/src/sampling.md")]
    pub struct Sampling;
    #[doc = include_str!("../../../book/src/decoder.md")]
    pub struct Decoder;
    #[doc = include_str!("../../../book/src/ensemble.md")]
    pub struct Ensemble;
    #[doc = include_str!("../../../book/src/synthgym.md")]
    pub struct Synthgym;
    #[doc = include_str!("../../../book/src/cli.md")]
    pub struct Cli;
}
