//! Desk-scale spacetime-pyramid autoregressive video modeling.
//!
//! A video is tokenized as one image pyramid (the anchor frame) followed by a
//! sequence of clip pyramids that share a fixed latent duration. Each pyramid
//! is a coarse-to-fine stack of residual blocks; every block is quantized to
//! binary codes on the unit sphere and predicted next-scale-autoregressively
//! by a small transformer with block-causal attention and a four-component
//! (scale, time, height, width) rotary embedding.
//!
//! This crate holds the pure algorithms: scale schedules, latent volumes,
//! binary spherical quantization, the residual codec with bitwise
//! self-correction, attention masks and rotary ids, the transformer itself,
//! interactive-conditioning helpers, and the synthetic scene renderer. It is
//! `no_std` + `alloc`; file formats, configuration, and the CLI live in the
//! companion `stpyr-cli` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod bsq;
pub mod codec;
pub mod interact;
pub mod model;
pub mod optim;
pub mod patch;
pub mod schedule;
pub mod synth;
pub mod volume;
