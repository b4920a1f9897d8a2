//! Sequential ensembling of small semantic-segmentation networks.
//!
//! The crate is `no_std` + `alloc`: it holds the reverse-mode autodiff engine,
//! the segmentation backbone with ADON conditioning blocks, the training loop,
//! ensemble combination rules, calibration and analysis metrics, and the
//! synthetic dataset generator. File formats and the experiment CLI live in the
//! `seqens` crate.
#![cfg_attr(not(feature = "std"), no_std)]
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

extern crate alloc;

pub mod analysis;
pub mod calibration;
pub mod data;
pub mod ensembling;
pub mod error;
pub mod nets;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, LabelMap, ProbabilityMap, Real, Tensor, Var};
