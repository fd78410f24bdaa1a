//! Self-supervised blind-spot denoising (Noise2Void and the N2V2 variant).
//!
//! The pipeline: simulate noise ([`noise`]), split data ([`data`]), mask
//! blind spots ([`masking`]), train a U-Net ([`model`], [`train`]), then
//! predict tile by tile and score PSNR ([`eval`]).

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod noise;
pub mod reproduce;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
