//! Temporal-adapter laboratory core.
//!
//! A small dense-tensor engine with reverse-mode differentiation and
//! activation checkpointing, plus everything built on it: bottleneck and
//! temporal-informative adapters, a chunked transformer video encoder with
//! inside and side adapter placements, a one-stage anchor-free action
//! detection head, synthetic untrimmed-video generation and preprocessing,
//! temporal-IoU evaluation, and an analytic training-memory model.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the command-line harness live in the `tialab` crate.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod adapters;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod layers;
pub mod memory;
pub mod param;
pub mod pipeline;
pub mod real;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Block, BlockRef, Graph, MemoryMeter, Region, Var};
pub use param::{AdamW, Gradients, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tensor::{ConvGeometry, Tensor};
