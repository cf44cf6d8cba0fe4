//! Dense f64 tensor ops, reverse-mode autodiff, batch norm, and Adam.

pub mod adam;
pub mod batchnorm;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use adam::Adam;
pub use batchnorm::{BatchNorm, BnMode, BN_EPS, BN_MOMENTUM};
pub use params::{checksum, ParamEntry, ParamId, ParamSet};
pub use tape::{ElementwiseOp, Gradients, Tape, Tensor};
