//! Two-stage private data sharing for small longitudinal cohorts.
//!
//! Stage 1 releases differentially private zero-inflation summaries and
//! turns them into synthetic cohorts; stage 2 answers typed validation
//! requests on the real cohort under disclosure control. The [`audit`]
//! module measures the membership-inference risk of the whole pipeline.

pub mod audit;
pub mod cli;
pub mod cohort;
pub mod dp;
pub mod error;
pub mod metrics;
mod normal;
pub mod seed;
pub mod synth;
pub mod tradeoff;
pub mod validate;

pub use error::{Error, Result};
