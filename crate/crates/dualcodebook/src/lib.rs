//! Dual-codebook point cloud completion.
//!
//! This crate implements a coarse-to-fine completion network for partial
//! point clouds in which both the shallow (pre-encoder) and deep
//! (post-decoder) feature streams are vector-quantized against learnable
//! codebooks, and a quantized information exchange (QIE) bridge re-targets
//! codes from one codebook into the other so the two streams can share
//! structure. Everything runs on a 64-bit reverse-mode autodiff tape so that
//! analytic gradients can be verified against central finite differences.
//!
//! The crate is organised as:
//!
//! * [`autodiff`] — tensors, the gradient tape, finite-difference checking;
//! * [`geometry`] — farthest point sampling, region grouping, Chamfer
//!   distances, F-score, minimal matching distance;
//! * [`codebook`] — learnable code vectors and nearest-code quantization;
//! * [`qie`] — deduplicate / re-target / merge code exchange and its losses;
//! * [`model`] — the completion network and its loss;
//! * [`data`] — synthetic shape sampling, partial views, `.xyz` i/o,
//!   dataset manifests;
//! * [`harness`] — training, evaluation, ablation, checkpoints, reports and
//!   the pieces behind the `dualcodebook` CLI.
//!
//! A rendered guide lives in `book/`; its code snippets are compiled and run
//! as doc-tests (see the crate's `guide` module) so the book cannot drift
//! from the library.

pub mod autodiff;
pub mod codebook;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod qie;

pub mod guide;

pub use error::{Error, Result};
