//! Task-conditioned adapter generation for a miniature text-to-text
//! transformer.
//!
//! A frozen encoder-decoder "main network" reads `description <sep> source`
//! and emits a target string. A hypernetwork maps the task description alone
//! to per-layer bottleneck adapter weights that are plugged into the main
//! network, so a task never seen during training can still get its own
//! specialized model. Training happens in two stages: first the main network
//! is fine-tuned on all examples, then it is frozen and the hypernetwork is
//! trained at the task level.
//!
//! The crate is organized around that flow:
//!
//! - [`numerics`]: deterministic tensors, a small reverse-mode autodiff
//!   graph, Adam, and a finite-difference gradient checker.
//! - [`model`]: the main network (transformer, tokenizer, adapter slots,
//!   checkpoint I/O).
//! - [`hypernet`]: description encoder plus per-layer decoders that emit
//!   flat adapter parameter vectors.
//! - [`training`]: the two-stage procedure, a random-adapter baseline, early
//!   stopping, and a greedy coordinate-wise hyperparameter sweep.
//! - [`data`]: task/dataset model, JSONL I/O, question-type dataset builders,
//!   a compositional task generator, and ablation subsampling.
//! - [`eval`]: token-level F1, per-task mean F1, Competence@K, and reports.
//! - [`cli`]: the `hyperadapt` command-line entry point.
//!
//! Runnable walkthroughs live in `examples/`; start with
//! `cargo run --example train_pipeline`.

pub mod cli;
pub mod data;
pub mod eval;
pub mod hypernet;
pub mod model;
pub mod numerics;
pub mod training;

pub use numerics::{Rng, Scalar, Tensor1, Tensor2};
