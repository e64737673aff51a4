pub mod bqm;
pub mod codec;
pub mod downstream;
pub mod error;
pub mod griddata;
pub mod latentds;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pvum;
pub mod train;
pub mod vaeformer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/variables.md")]
    mod variables {}
    #[doc = include_str!("../../../book/src/pvum.md")]
    mod pvum {}
    #[doc = include_str!("../../../book/src/tokens.md")]
    mod tokens {}
    #[doc = include_str!("../../../book/src/codec.md")]
    mod codec {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/latent-datasets.md")]
    mod latent_datasets {}
    #[doc = include_str!("../../../book/src/forecasting.md")]
    mod forecasting {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
