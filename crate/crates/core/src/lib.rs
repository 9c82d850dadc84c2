//! Personalized training of small image classifiers: shaping schedules,
//! latent-space data grouping, evaluation and the experiment harness.

pub mod curriculum;
pub mod data;
pub mod error;
pub mod grouping;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod util;

pub use error::{Error, Result};
