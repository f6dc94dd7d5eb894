//! Kuramoto oscillatory phase encoding for transformer token sequences.
//!
//! Tokens carry, alongside their activations, a set of unit phase vectors per
//! attention head. Layer by layer the phases are pulled together by a
//! discrete Kuramoto step whose coupling is computed from the token
//! activations, and the attention module reads them through rotations of the
//! query/key and value/output vectors.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`gradcheck`]: dense kernels, reverse-mode tape, finite-difference checks
//! - [`kuramoto`]: phase states, coupling matrices, the discrete update, energy and order parameters
//! - [`phase_attention`]: rotary phase injection, phase initialization, data-adaptive coupling
//! - [`model`]: ViT and phase-coupled ViT stacks, cost counters, checkpoints
//! - [`theory`]: the shallow attention testbed, hinge-loss training and concentration lemmas
//! - [`metrics`]: Gini concentration, attention-weighted and per-entity synchronization

pub mod error;
pub mod gradcheck;
pub mod kuramoto;
pub mod metrics;
pub mod model;
pub mod par;
pub mod phase_attention;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod theory;

pub use error::{KopeError, Result};
pub use par::Exec;
pub use rng::KopeRng;
pub use tape::{Grads, Primitive, Tape, Var};
pub use tensor::{DType, Tensor};
