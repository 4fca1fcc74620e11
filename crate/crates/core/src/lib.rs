//! Frequency attention knowledge distillation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`] and [`tape`]: dense arrays, differentiable kernels
//!   and a reverse-mode tape over them.
//! - [`spectral`]: per-channel 2-D DFTs and the ideal high-pass mask.
//! - [`fam`]: the frequency attention module (global filter + HPF branch,
//!   1×1 local branch, learnable weighting).
//! - [`attention`]: local self-attention and cross-attention fusion.
//! - [`distill`]: layer-to-layer and review losses plus the total objective.
//! - [`model`], [`data`], [`checkpoint`], [`optim`], [`trainer`]: the
//!   training harness.
//! - [`oracles`] and [`selftest`]: brute-force references and the report
//!   that checks every kernel against them.
//!
//! All numerical code is generic over [`Scalar`]; training uses `f32` and
//! verification uses `f64`.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod distill;
pub mod error;
pub mod fam;
pub mod model;
pub mod ops;
pub mod optim;
pub mod oracles;
pub mod params;
pub mod scalar;
pub mod selftest;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::NamedParams;
pub use scalar::Scalar;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::{ComplexTensor, Tensor};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ComplexTensor32 = ComplexTensor<f32>;
pub type ComplexTensor64 = ComplexTensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type FamParams32 = fam::FamParams<f32>;
pub type FamParams64 = fam::FamParams<f64>;


pub type StagedModel32 = model::StagedModel<f32>;
pub type StagedModel64 = model::StagedModel<f64>;
