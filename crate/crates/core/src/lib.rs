//! Hierarchical state-change and counterfactual contrastive pretraining at
//! desk scale: a small reverse-mode autodiff engine, frame/clip/video
//! encoders, the contrastive objectives, a synthetic procedural world, a
//! training loop and the evaluation metrics.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod seed;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
