//! Per-sample Fisher scores of a masked-convolution PixelCNN as image embeddings.
//!
//! The crate trains the autoregressive model ([`pixel_model`]) on a reverse-mode
//! tape ([`autodiff`]), turns each image into a gradient of its log-likelihood
//! ([`fisher`]), compresses those gradients with regenerable sparse random
//! projections and optional PCA ([`projection`]), and learns a decoder back to
//! pixels ([`decoder`]). [`interp`] scores decoded interpolations with a
//! Fréchet distance; [`semantic`] builds attribute vectors. [`pipeline`] chains
//! the stages over hashed on-disk artifacts ([`formats`]).

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
pub mod classifier;
pub mod config;
pub mod conv;
pub mod decoder;
pub mod data;
pub mod error;
pub mod fisher;
pub mod formats;
pub mod grid;
pub mod interp;
pub mod optim;
pub mod params;
pub mod pixel_model;
pub mod pipeline;
pub mod projection;
pub mod report;
pub mod rng;
pub mod semantic;
pub mod tensor;

pub use error::{Error, Result};
