//! ECG denoising with a convolutional denoising autoencoder.
//!
//! The crate is organized bottom-up:
//!
//! - [`wfdb`]: WFDB header and format-212 signal decoding.
//! - [`pipeline`]: segmentation, normalization, noise injection, datasets, metrics.
//! - [`tfr`]: short-time Fourier analysis/synthesis and spectral masking.
//! - [`autograd`]: dense tensors with a reverse-mode gradient tape.
//! - [`model`]: the autoencoder (improved ReLU, channel-averaged skips, attention).
//! - [`trainer`]: Adam training, evaluation and checkpoints.

pub mod autograd;
pub mod model;
pub mod pipeline;
pub mod tfr;
pub mod trainer;
pub mod util;
pub mod wfdb;
