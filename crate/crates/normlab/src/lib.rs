//! Desk-scale numerical laboratory for transformer normalization placement.
//!
//! The crate makes the normalization-placement design space executable at
//! sizes where everything can be checked against brute force: dense 64-bit
//! matrices, materialized Jacobians, finite-difference oracles, and a toy
//! causal-LM training loop.
//!
//! Module map:
//! - [`tensor`]: dense matrix core, softmax, RMS/Layer norm, matrix norms.
//! - [`vecjac`]: row-vectorization matrix calculus (Kronecker products,
//!   commutation matrices, block-diagonal Jacobians, finite differences).
//! - [`attention`]: attention-internal normalization variants, multi-head /
//!   grouped-query assembly, closed-form weight Jacobians of single-head
//!   attention and their gradient-norm bounds.
//! - [`autograd`]: minimal reverse-mode tape over `Matrix` used by the block
//!   zoo and the trainer.
//! - [`blocks`]: every block-level normalization placement, SwiGLU FFN,
//!   first-block variants, initialization schemes, whole-model forward and
//!   gradients, checkpointing.
//! - [`diagnostics`]: per-layer gradient-norm profiles, token cosine
//!   similarity, attention entropy, bound-sampling campaigns, and analytic
//!   parameter/FLOPs accounting.
//! - [`trainer`]: AdamW + cosine schedule training loop over synthetic
//!   corpora.

pub mod attention;
pub mod autograd;
pub mod blocks;
pub mod diagnostics;
pub mod tensor;
pub mod trainer;
pub mod vecjac;
