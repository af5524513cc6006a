//! Simulation of a three-step 780/776/1260 nm laser lock chain to Rydberg
//! levels of 85Rb: laser noise, the velocity-averaged cascade signal, dither
//! and lock-in, the coupled servo loops, comb counting and Allan analysis.
//!
//! The guide in `book/` walks through each layer; its code blocks are
//! compiled as doctests of this crate.

pub mod allan;
pub mod atomic;
pub mod counter;
pub mod discriminator;
pub mod error;
pub mod lockin;
pub mod noise;
pub mod quad;
pub mod scenario;
pub mod servo;

pub use error::{Error, Result};

// mdbook cannot test its own snippets, so every chapter becomes a module
// whose docs rustdoc runs.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/lineshape.md")]
    mod lineshape {}
    #[doc = include_str!("../../../book/src/error_signal.md")]
    mod error_signal {}
    #[doc = include_str!("../../../book/src/noise.md")]
    mod noise {}
    #[doc = include_str!("../../../book/src/servo.md")]
    mod servo {}
    #[doc = include_str!("../../../book/src/counting.md")]
    mod counting {}
    #[doc = include_str!("../../../book/src/scenarios.md")]
    mod scenarios {}
}
