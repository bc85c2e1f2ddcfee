//! Multi-metric speech quality prediction.
//!
//! A feature extractor feeds grouped transformer encoders (the absolute
//! metric prediction module, [`ampm`]) whose per-metric heads are squashed
//! into each metric's valid range by [`activation`]. Training tolerates
//! missing labels through a masked loss ([`objectives`]), and a cross-attention
//! comparator ([`ncpm`]) learns three-way preferences from pairs derived out
//! of absolute scores ([`pairs`]).
//!
//! The guide under `book/` walks through the pieces; its code blocks are
//! compiled as doctests of this crate.

pub mod activation;
pub mod ampm;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod features;
pub mod manifest;
pub mod model;
pub mod ncpm;
pub mod nn;
pub mod objectives;
pub mod pairs;
pub mod registry;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use registry::{default_registry, MetricRegistry, Supervision};

/// The guide under `book/`, compiled so its listings run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/range-activation.md")]
    mod range_activation {}
    #[doc = include_str!("../../../book/src/masked-loss.md")]
    mod masked_loss {}
    #[doc = include_str!("../../../book/src/preferences.md")]
    mod preferences {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
