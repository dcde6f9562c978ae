//! Desk-scale mixture-of-minimal-experts toolkit.
//!
//! Small transformer encoders are distilled from dense teachers by aligning
//! relation heads, with the student's capacity grown through per-token
//! top-1 routed minimal experts. Exact parameter/FLOP accounting shows the
//! routed students keep inference compute essentially flat while parameters
//! grow.
//!
//! Module map:
//! - [`tensor`]: f64 tensors with reverse-mode autodiff
//! - [`model`]: dense/MoE transformer encoders and the masked-LM objective
//! - [`moe`]: top-1 gating, hash routing, capacity dropping, balance loss
//! - [`distill`]: relation-head alignment, distillation and finetune loops
//! - [`compute`]: analytic parameter and FLOP counters, throughput bench
//! - [`spectra`]: SVD rank diagnostics and low-rank checkpoint truncation
//! - [`corpus`]: vocab, masked-LM batching, synthetic tasks
//! - [`harness`]: seeded experiment stages, sweeps, JSONL/CSV emission

pub mod checkpoint;
pub mod compute;
pub mod corpus;
pub mod distill;
pub mod harness;
pub mod model;
pub mod moe;
pub mod optim;
pub mod rng;
pub mod spectra;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use model::{EncoderModel, ModelConfig};
pub use moe::{RouterConfig, RoutingStats};
pub use tensor::{Tape, Tensor, TensorId};
