//! Desk-scale self-supervised training of patch features by sorting-based
//! neighbor consistency.
//!
//! The crate bundles everything the training objective needs end to end:
//! a minimal reverse-mode tensor engine ([`tensor`]), differentiable sorting
//! networks producing relaxed permutation matrices ([`sortnet`]), the
//! neighbor-ordering cross-entropy loss ([`loss`]), a toy ViT-style
//! student/teacher encoder pair ([`model`]), two-view cropping with feature
//! alignment ([`views`]), a synthetic labeled scene generator ([`data`]),
//! an Adam training loop ([`train`]), and frozen-feature evaluation
//! protocols ([`eval`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod model;
pub mod seed;
pub mod sortnet;
pub mod tensor;
pub mod train;
pub mod views;

pub use error::{Error, Result};
