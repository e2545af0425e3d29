pub mod config;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod error;
pub mod policy;
pub mod rewards;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorCategory, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/datasets.md")]
    mod datasets {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
