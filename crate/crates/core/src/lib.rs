//! Action forecasting on precomputed per-frame feature sequences.
//!
//! The model observes the first part of an activity as a `T x d` feature
//! matrix and predicts the action labels of frames it has not seen. A
//! bidirectional GRU encodes the observed window, a multi-head
//! self-attention block attends across the *feature* dimensions (each of
//! the `d` feature rows is one attention token), an auxiliary linear head
//! classifies the observed frames, and a single-layer GRU decoder rolls
//! out one label per future step.
//!
//! Everything is built on a small reverse-mode autodiff tape over dense
//! `f64` tensors ([`tensor`]), so gradients for the whole network come
//! from one `backward` call. The crate also ships a synthetic activity
//! generator ([`data`]), an Adam training loop with early stopping
//! ([`train`]), a mean-per-class-accuracy evaluation harness with
//! ablation and sweep drivers ([`eval`]), and a finite-difference
//! gradient checker ([`gradcheck`]).

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
