//! Motion feature networks on a small from-scratch CNN stack.
//!
//! The crate bundles a reverse-mode autodiff engine ([`tensor`]), the fixed
//! shift-and-subtract motion filter and its fusion blocks ([`motion`]), a
//! staged residual backbone that threads motion blocks between consecutive
//! snippets ([`backbone`]), segment-based sampling and consensus ([`tsn`]),
//! a synthetic symmetric-gesture dataset plus frame-folder ingestion
//! ([`data`]), and finite-difference gradient verification ([`gradcheck`]).

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod motion;
pub mod nn;
pub mod tensor;
pub mod tsn;
pub mod util;

pub use error::{Error, Result};
pub use tensor::Tensor;
