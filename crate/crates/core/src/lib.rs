//! Numerical building blocks for training dense-geometry predictors with
//! flow matching on BF16-quantized labels.
//!
//! - [`bf16`]: bit-exact BF16 rounding and step models.
//! - [`depth_codec`]: uniform / inverse / logarithmic depth label codecs,
//!   percentile log normalization, and the worst-case error model.
//! - [`tensor`]: a small reverse-mode autodiff engine with MLP, attention,
//!   AdamW and the dispersion regularizer.
//! - [`flow`]: flow-matching objectives, Euler and single-step inference,
//!   velocity-field diagnostics, and the training loop.
//! - [`joint`]: width-concatenated token model supervising depth and normals
//!   in one pass.
//! - [`metrics`]: affine-aligned depth metrics and normal angular metrics.
//! - [`scenes`]: procedural scenes with analytic normals and dataset
//!   persistence.

pub mod bf16;
pub mod depth_codec;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod joint;
pub mod metrics;
pub mod scenes;
pub mod tensor;

pub use bf16::{round_to_bf16, Bf16, StepModel};
pub use depth_codec::{NormalizedLabel, QuantScheme, SchemeKind};
pub use error::{Error, Result};
pub use grid::{Grid, Mask, NormalGrid};
pub use tensor::{Module, Parameter, Tape, Tensor, Var, VelocityModel};
