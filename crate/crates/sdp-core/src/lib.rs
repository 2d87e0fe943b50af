//! Skill-conditioned diffusion policy over a synthetic kinematic gripper benchmark.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`] — dense tensors, a recorded-operation graph with reverse-mode
//!   gradients, AdamW, and counter-based RNG streams.
//! - [`world`] — the tabletop environment, scripted skill-labeled experts, and
//!   demonstration datasets.
//! - [`skillspace`] — the eight primitive skills, prompt ensembling, and the
//!   orthogonality loss on prompt embeddings.
//! - [`percept`] — observation/instruction encoders and the fusion transformer.
//! - [`router`] — top-1 skill assignment with gate-scaled straight-through
//!   gradients, plus per-timestep trace records.
//! - [`denoiser`] — the DiT-style denoising network with shared AdaLN modulation,
//!   cross-attention context, and the skill-generated low-rank FFN branch.
//! - [`diffusion`] — continuous-noise training loss and the deterministic DDIM
//!   sampler, plus receding-horizon action execution.
//! - [`trainer`] — joint optimization, chain evaluation, alignment diagnostics,
//!   and checkpoints.
//! - [`config`] — the run configuration file shared by every component.
//! - [`selftest`] — gradient and invariant checks runnable from the CLI.

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod numerics;
pub mod percept;
pub mod policy;
pub mod router;
pub mod selftest;
pub mod skillspace;
pub mod trainer;
pub mod world;

pub use error::{Result, SdpError};
