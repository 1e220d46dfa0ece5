//! Simulation core for template-poisoning ("biometric backdoor") attacks
//! against authentication pipelines that self-update their user templates.
//!
//! The crate is `no_std` (it only needs `alloc`) and contains every algorithm:
//! the differentiable synthetic feature extractor, the three template matchers
//! with EER calibration, the infinite-window self-update policy, poisoning
//! sample generation and injection, the angular-similarity detector, and the
//! error-rate metrics. File formats, configuration and the CLI live in the
//! `biobackdoor` companion crate.

#![no_std]
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attack;
pub mod defense;
pub mod error;
pub mod feature_space;
pub mod linalg;
pub mod matchers;
pub mod metrics;
pub mod seed;
pub mod template_update;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// An embedding produced by a [`feature_space::FeatureExtractor`].
pub type Embedding = alloc::vec::Vec<f64>;

/// A raw input sample; every value is a normalized intensity in `[0, 1]`.
pub type RawSample = alloc::vec::Vec<f64>;
