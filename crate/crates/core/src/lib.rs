//! Low-rank adapters with token-wise diagonal gating.
//!
//! A frozen weight `W` is adapted per token `x` as
//! `y = W·x + (α/r)·B·Diag(σ(x))·A·x`, where the gate
//! `σ(x) = exp(rmsnorm(Θ·x))` is computed from the token itself. With
//! `Θ = 0` the gate is the identity and the adapter is plain LoRA.
//!
//! Modules:
//! - [`linalg`]: matrices, thin QR/LQ, singular values, numerical rank.
//! - [`adapters`]: LoRA and gated adapters, forward/backward, merging, parameter counts.
//! - [`analysis`]: input space / output space / projection decomposition of `B·A`.
//! - [`training`]: synthetic teacher tasks, AdamW, training and evaluation loops.
//! - [`weights`]: the `TPLW1` binary weight container.
//! - [`gradcheck`]: central finite-difference verification of the backward pass.

pub mod adapters;
pub mod analysis;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod training;
pub mod weights;

pub use adapters::{
    param_count, Adapter, AdapterConfig, AdapterKind, AnyAdapter, DropoutMask, GradientSet,
    LoraAdapter, TopLoraAdapter,
};
pub use analysis::{AblationDispersion, ProjectionAnalysis, SigmaDispersion};
pub use error::{Error, Result};
pub use linalg::{Matrix, Vector};
