//! Detection and classification of animal calls in raw audio by frame-level
//! sequence labeling.
//!
//! The pipeline resamples audio to 16 kHz, cuts it into 20 ms frames,
//! computes one feature vector per frame, and trains a recurrent or
//! attention-based sequence model to predict a class per frame (class 0 is
//! "no call"). Evaluation reports frame accuracy, per-class and weighted F1,
//! and the area under the precision-recall curve for binary detection.

pub mod annotations;
pub mod audio;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
