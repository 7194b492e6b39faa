//! Joint energy-based-model training for calibrated text classifiers.
//!
//! A self-contained library and CLI for studying classifier calibration on
//! synthetic text-classification tasks. A small transformer encoder is
//! finetuned with cross-entropy, optionally joined by a noise-contrastive
//! estimation loss that treats the classifier as an energy-based model of
//! the input distribution. The suite includes an autoregressive noise
//! language model, post-hoc calibrators (temperature scaling,
//! scaling-binning), expected calibration error with reliability diagrams,
//! and a reproducible experiment runner.

pub mod autodiff;
pub mod calibration;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod energy;
pub mod experiment;
pub mod model;
pub mod noise;
pub mod rng;
