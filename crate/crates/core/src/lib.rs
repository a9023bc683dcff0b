//! Learned next-step attention prediction for KV-cache critical-token selection.
//!
//! The crate covers the whole pipeline: the `.att1` trace format, synthetic
//! trace generation, block compression, the CNN predictor and its training
//! loop, the budgeted selector, reference selection baselines, the
//! evaluation harness and a latency model of cross-token prefetching.

pub mod baselines;
pub mod compress;
pub mod config;
pub mod error;
pub mod eval;
pub mod predictor;
pub mod prefetchsim;
pub mod selector;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
