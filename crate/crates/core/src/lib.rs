//! Heterogeneous collaborative perception on a toy 2-D world: scenario
//! generation, small convolutional detectors over a reverse-mode tape, the
//! per-collaborator adapter with its two-stage self-training protocol, and the
//! evaluation harness.
//!
//! The guide in `book/` walks through each module; its code blocks run as
//! doc-tests of this crate.

pub mod adapter;
pub mod error;
pub mod eval;
pub mod harness;
pub mod ndgrad;
pub mod percept;
pub mod pretrain;
pub mod protocol;
pub mod rng;
pub mod selftrain;
pub mod world;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/overview.md")]
    mod overview {}
    #[doc = include_str!("../../../book/src/world.md")]
    mod world {}
    #[doc = include_str!("../../../book/src/autograd.md")]
    mod autograd {}
    #[doc = include_str!("../../../book/src/perception.md")]
    mod perception {}
    #[doc = include_str!("../../../book/src/adapter.md")]
    mod adapter {}
    #[doc = include_str!("../../../book/src/selftrain.md")]
    mod selftrain {}
    #[doc = include_str!("../../../book/src/protocol.md")]
    mod protocol {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
