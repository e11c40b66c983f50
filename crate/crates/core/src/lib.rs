//! Top-down spatial attention loss for fine-grained classification.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense 4-D tensors and a reverse-mode tape.
//! * [`resample`]: half-pixel upsampling and channel repetition.
//! * [`loss`]: mutual-channel and top-down spatial attention losses.
//! * [`oracle`]: finite differences and naive-loop reference losses.
//! * [`backbone`], [`trainer`], [`datagen`]: a small two-tap CNN, its SGD
//!   training loop, and a synthetic dataset with planted regions.
//! * [`checkpoint`], [`config`], [`visualize`]: file formats for models,
//!   run settings and channel heatmaps.
//! * [`selftest`] and [`experiment`]: verification suites and seed sweeps.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is on (the default) and plain iterators otherwise.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod error;
pub mod experiment;
pub mod loss;
pub mod oracle;
pub mod par;
pub mod resample;
pub mod selftest;
pub mod tensor;
pub mod trainer;
pub mod visualize;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor4};
