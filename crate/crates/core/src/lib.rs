pub mod bound;
pub mod cache;
pub mod cql;
pub mod distribution;
pub mod embedding;
pub mod env;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod policy;
pub mod provider;
pub mod rl;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    pub mod intro {}
    #[doc = include_str!("../../../book/src/cache.md")]
    pub mod cache {}
    #[doc = include_str!("../../../book/src/posterior.md")]
    pub mod posterior {}
    #[doc = include_str!("../../../book/src/meta.md")]
    pub mod meta {}
    #[doc = include_str!("../../../book/src/bound.md")]
    pub mod bound {}
    #[doc = include_str!("../../../book/src/offline.md")]
    pub mod offline {}
    #[doc = include_str!("../../../book/src/fewshot.md")]
    pub mod fewshot {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
