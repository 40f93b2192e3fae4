//! Thresholded attention dropout and layer dropout for self-supervised
//! transformer encoders over spectrogram-like sequences.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`graph`]), the encoder with both dropout mechanisms ([`attention`],
//! [`encoder`]), input alteration for masked-reconstruction pretraining
//! ([`alteration`]), the training loop and checkpoints ([`pretrain`],
//! [`checkpoint`]), frozen-representation probes ([`probe`]), and the
//! file formats and commands behind the `tdrop` binary ([`data`], [`cli`]).

pub mod alteration;
pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dropout;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
