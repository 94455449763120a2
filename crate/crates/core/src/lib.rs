pub mod clipping;
pub mod config;
pub mod divergence;
pub mod error;
pub mod policy;
pub mod ranges;
pub mod report;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/ranges.md")]
    mod ranges {}
    #[doc = include_str!("../../../book/src/clipping.md")]
    mod clipping {}
    #[doc = include_str!("../../../book/src/tabular.md")]
    mod tabular {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/checks.md")]
    mod checks {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
