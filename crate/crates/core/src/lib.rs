//! Perturbation-driven weakness probes and key→value weight rewriting for a
//! small multi-scale convolutional instance segmenter, evaluated with
//! instance-matched precision, recall and IoU.

pub mod error;
pub mod harness;
pub mod metrics;
pub mod numerics;
pub mod perturb;
pub mod rewrite;
pub mod segnet;
pub mod synthgen;

pub use error::{Error, Result};
