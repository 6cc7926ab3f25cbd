//! Interaction-pattern analysis of simulated guidance behavior.
//!
//! The modules follow the pipeline order: [`sim`] produces trajectories,
//! [`symbolic`] and [`segment`] find subgoals, [`matching`] groups segments
//! into patterns, [`pwa`] fits motion modes, [`partition`] predicts
//! subgoals from the environment, and [`hhmm`] ties everything together.
//! [`pipeline`] runs the stages with persistence.

pub mod dubins;
pub mod error;
pub mod gmm;
pub mod group;
pub mod hhmm;
pub mod isomap;
pub mod kmeans;
pub mod matching;
pub mod model;
pub mod partition;
pub mod pipeline;
pub mod pwa;
pub mod route;
pub mod segment;
pub mod sim;
pub mod svg;
pub mod symbolic;

pub use error::{Error, Result};

// Book chapters, so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/behavior.md")]
    mod behavior {}
    #[doc = include_str!("../../../book/src/subgoals.md")]
    mod subgoals {}
    #[doc = include_str!("../../../book/src/patterns.md")]
    mod patterns {}
    #[doc = include_str!("../../../book/src/modes.md")]
    mod modes {}
    #[doc = include_str!("../../../book/src/partition.md")]
    mod partition {}
    #[doc = include_str!("../../../book/src/hhmm.md")]
    mod hhmm {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
