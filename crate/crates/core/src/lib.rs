//! Complex-valued spatial autoencoder (COSPA) for online multichannel speech
//! enhancement.
//!
//! The crate is `no_std` with `alloc`: it carries the numerics only. File
//! formats, WAV I/O and the command-line front end live in the `cospa`
//! companion crate.
//!
//! Layout:
//!
//! - [`ctensor`]: complex tensors, a reverse-mode tape with Wirtinger
//!   (conjugate cogradient) gradients, Adam, and a finite-difference checker.
//! - [`clayers`]: complex FC / conv / transposed conv / GRU / batch norm
//!   layers and the bounded mask activation.
//! - [`stft`]: square-root Hann analysis and overlap-add synthesis.
//! - [`scene`]: random room scenarios, image-source RIRs, mixture rendering.
//! - [`beamforming`]: steering vectors, recursive covariance, MVDR/GMVDR,
//!   ideal ratio masks and training targets.
//! - [`cospa`]: the network, its SNR loss, training and streaming inference.
//! - [`eval`]: SINR/SDR metrics, shadow filtering and beampatterns.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod beamforming;
pub mod clayers;
pub mod cospa;
pub mod ctensor;
pub mod error;
pub mod eval;
pub mod fft;
pub mod filter;
pub mod scene;
pub mod stft;

pub use error::{Error, Result};

/// Double-precision complex scalar used throughout.
pub type C64 = num_complex::Complex64;
