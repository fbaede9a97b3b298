//! Low-rank adaptation at desk scale.
//!
//! This crate implements the full mechanics of low-rank adaptation of a
//! frozen base model — injection, training, merging, and task switching —
//! together with the classic baselines it is usually compared against
//! (full fine-tuning, bias-only tuning, prefix tuning, bottleneck
//! adapters), closed-form trainable-parameter budgets, and SVD-based
//! subspace analysis of the learned updates.
//!
//! Everything is built on a small dense-`f64` stack: [`Matrix`], a Jacobi
//! [`svd`], a Wengert-tape reverse-mode autodiff engine ([`tape::Tape`]),
//! and an AdamW optimizer. On top of that sits a toy decoder-only
//! transformer ([`model`]) that is large enough for rank `r` to be much
//! smaller than `d_model` yet small enough to train in seconds.
//!
//! The crate is `no_std`-compatible (`alloc` required); the `std` feature
//! (on by default) enables runtime SIMD dispatch in the matmul backend.
//! File formats, the CLI, and the latency benchmark live in the companion
//! `lorakit-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adapters;
pub mod analysis;
pub mod budget;
pub mod error;
mod fmath;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod rng;
pub mod svd;
pub mod tape;

pub use error::CoreError;
pub use matrix::Matrix;
pub use svd::{svd, SvdResult};

/// Crate-wide result type.
pub type Result<T> = core::result::Result<T, CoreError>;
