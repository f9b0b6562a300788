//! The user guide, one module per chapter of the rendered book.
//!
//! Each module's documentation is included verbatim from a chapter under
//! `book/src/`, so every Rust snippet in the book compiles and runs as a
//! doc-test of this crate: the book cannot drift from the code it describes.
//! Render the browsable version with `mdbook build book`.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/codebooks.md")]
pub mod codebooks {}

#[doc = include_str!("../../../book/src/exchange.md")]
pub mod exchange {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
