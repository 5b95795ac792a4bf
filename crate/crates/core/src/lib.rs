pub mod error;
pub mod numerics;
pub mod shards;
pub mod annotation;
pub mod crosscoder;
pub mod diffing;
pub mod exemplars;
pub mod report;
pub mod cli;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/shards.md")]
    mod shards {}
    #[doc = include_str!("../../../book/src/crosscoder.md")]
    mod crosscoder {}
    #[doc = include_str!("../../../book/src/diffing.md")]
    mod diffing {}
    #[doc = include_str!("../../../book/src/exemplars.md")]
    mod exemplars {}
    #[doc = include_str!("../../../book/src/annotation.md")]
    mod annotation {}
    #[doc = include_str!("../../../book/src/report.md")]
    mod report {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
