//! Streaming multi-point tracking for grayscale (ultrasound-like) video.
//!
//! The crate is `no_std` + `alloc`: it holds the model, the autodiff engine
//! it trains with, the synthetic-motion simulator, keypoint detectors,
//! baselines and metrics. File formats, timing and the command line live in
//! the companion `usptrack` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod baselines;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod keypoints;
pub mod losses;
pub mod math;
pub mod params;
pub mod sampling;
pub mod simulator;
pub mod teacher;
pub mod tensor;
pub mod tracker;
pub mod trainer;

pub use datamodel::{GrayImage, Point, PointSet, TrajectorySet, TrajectorySource, VideoSequence};
pub use error::{Error, Result};
pub use tensor::Tensor;
