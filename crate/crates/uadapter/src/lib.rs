//! Uncertainty-aware Gaussian adapters for frozen graph neural networks.
//!
//! The crate trains a small GIN backbone on synthetic graphs, freezes it, and
//! fine-tunes lightweight adapter modules that model each insertion point as
//! a Gaussian (mean and variance branches with reparameterized sampling)
//! rather than a point estimate. Everything runs on a CPU-only f64 tape with
//! deterministic seeding so runs are reproducible bit for bit.

pub mod adapter;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod graph;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use rng::RngTree;
