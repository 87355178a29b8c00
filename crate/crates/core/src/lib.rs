pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod pointcloud;
pub mod procgen;
pub mod proposer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/frames.md")]
    mod frames {}
    #[doc = include_str!("../../../book/src/point_clouds.md")]
    mod point_clouds {}
    #[doc = include_str!("../../../book/src/objects.md")]
    mod objects {}
    #[doc = include_str!("../../../book/src/denoising.md")]
    mod denoising {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/proposers.md")]
    mod proposers {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
