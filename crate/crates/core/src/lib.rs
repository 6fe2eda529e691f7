//! Deterministic single-process simulator of multi-institution federated
//! training for multi-region (head / body / tail) organ segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with tape-based reverse-mode autodiff
//! - [`nets`]: tiny U-Net and attention-gated U-Net over a flat parameter vector
//! - [`objectives`]: region-weighted soft Dice loss and the FedProx proximal objective
//! - [`optim`]: AdamW with decoupled weight decay
//! - [`federation`]: client updates, sample-weighted aggregation, round loop, best-model selection
//! - [`synthdata`]: multi-site phantom generator, splits, and preprocessing
//! - [`metrics`]: Dice, IoU, precision, recall, ASSD and HD95
//! - [`harness`]: experiment configuration, benchmark grid, persistence and replay
//!
//! Every capability has a runnable program under `examples/`.

pub mod error;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
