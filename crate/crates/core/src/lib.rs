//! Probabilistic feature imputation for modality-heterogeneous federated
//! learning.
//!
//! The crate is `no_std` (it needs `alloc`) and covers the numerical side:
//! a small tensor/autodiff engine, the imputation network and its fusion
//! and classifier heads, synthetic paired-feature generation, federated
//! training with uncertainty-weighted aggregation, and evaluation metrics.
//! File formats, configuration, and the experiment CLI live in `pfin-sim`.

#![no_std]

extern crate alloc;

pub mod error;
pub mod federation;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pfin;
pub mod rng;
pub mod special;
pub mod synth;
pub mod tensor;
pub mod train;

mod kernels;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{Bound, ParamSet};
pub use tensor::Tensor;
