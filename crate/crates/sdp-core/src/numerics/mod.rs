//! Minimal dense-tensor math with reverse-mode gradient accumulation.
//!
//! Design constraints observed throughout: deterministic node ordering (gradient
//! accumulation by summation in recording order), 64-bit mode for verification
//! suites with 32-bit available for training, and counter-based RNG streams so
//! every component draws from an independently seeded, replayable sequence.

mod adamw;
mod graph;
mod params;
mod rng;
mod scalar;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use graph::{Graph, Var};
pub use params::{Binding, ParamId, ParamStore};
pub use rng::{stream_hash, Rng};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
