//! Desk-scale language-model laboratory.
//!
//! Everything needed to train, align, and probe tiny decoder-only
//! transformers with f64 math that is verifiable by closed-form oracles,
//! brute-force equivalences, and finite-difference gradient checks:
//!
//! - [`tensor`]: minimal reverse-mode autodiff over dense f64 tensors.
//! - [`model`]: the transformer with selectable norms, activations,
//!   positional schemes (learned/T5-bias/ALiBi/rotary + interpolation),
//!   grouped-query attention, and KV-cache variants for decoding.
//! - [`objectives`]: self-supervised example constructors (causal, prefix,
//!   masked, permuted, span/denoising corruptions, NSP, SFT).
//! - [`align`]: preference alignment — reward-model losses, PPO, DPO,
//!   best-of-N, process rewards, context distillation.
//! - [`inference`]: sampling, self-consistency voting, k-NN LM.
//! - [`lab`]: training loops, synthetic tasks, scaling-law fits, metrics.

pub mod align;
pub mod error;
pub mod gradcheck;
pub mod inference;
pub mod lab;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ActKind, Tape, Tensor, Var};
