//! Self-supervised meta-prompt learning at desk scale.
//!
//! The pipeline runs end to end on a synthetic corpus: sentences are
//! embedded by a frozen encoder, clustered with k-means, turned into
//! anchor meta-tasks in three formats, augmented by curriculum mixup of
//! query sets, and used to meta-train a soft prompt together with a gated
//! affine regularizer of the inner-loop gradient. A frozen two-head scorer
//! stands in for the language model, so every gradient is available in
//! closed form and can be checked against finite differences.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod clustering;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod metagrad;
pub mod metalearn;
pub mod optim;
pub mod pipeline;
pub mod promptmodel;
pub mod rng;
pub mod sampling;
pub mod taskgen;

pub use error::{Error, Result};
