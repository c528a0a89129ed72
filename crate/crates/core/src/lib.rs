//! Cross-subject SSVEP domain adaptation.
//!
//! The pipeline runs raw multi-channel epochs through channel selection,
//! latency segmentation and a zero-phase filter bank ([`preprocess`]),
//! whitens each domain with filter-bank Euclidean alignment ([`alignment`]),
//! pre-trains a compact CNN with a gradient-reversal domain head and then
//! adapts it to the unlabeled target subject with a mean-teacher,
//! multi-view pseudo-labelling loop plus a supervised contrastive term
//! ([`nnet`], [`trainer`]). [`evalx`] scores the result with accuracy and
//! ITR under leave-one-subject-out evaluation, next to a training-free
//! FBCCA baseline. [`synthgen`] supplies shifted synthetic subjects.

pub mod alignment;
pub mod config;
pub mod container;
pub mod error;
pub mod evalx;
pub mod nnet;
pub mod preprocess;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
