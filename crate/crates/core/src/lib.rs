//! Retrieval-augmented few-shot text classification at desk scale.
//!
//! The pieces: a tiny differentiable encoder ([`encoder::ToyEncoder`]) or a
//! frozen prototype classifier over precomputed features, an open-book
//! key-value store of training examples ([`store::KnowledgeStore`]) served
//! by exact or inverted-file inner-product search ([`index`]), and the
//! retrieval mechanics that tie them together ([`retro`]): neighbor vote
//! distributions, a kNN-guided training loss, demonstration fusion at the
//! embedding layer, and interpolated inference. [`trainer`] runs the
//! multi-seed training and evaluation protocols (including pseudo-labeled
//! zero-shot), and [`memorization`] measures per-example memorization with
//! explicit damped-Hessian influence functions.
//!
//! Everything is deterministic for a fixed seed: parallel sections (rayon,
//! behind the default `parallel` feature) only ever map in input order, and
//! every reduction runs sequentially, so results are bit-identical across
//! thread counts — and to the `--no-default-features` sequential build.

mod binfmt;

pub mod dataset;
pub mod encoder;
pub mod error;
pub mod index;
pub mod memorization;
pub mod par;
pub mod retro;
pub mod store;
pub mod synth;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
