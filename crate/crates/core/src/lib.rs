//! Adversarial pyramid network for video domain generalization.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`tape`]: dense tensors and a define-by-run reverse-mode tape.
//! * [`params`], [`optim`], [`checkpoint`]: named parameter sets, SGD and the
//!   `APN1` checkpoint container.
//! * [`attention`]: multi-head attention and the attention block.
//! * [`pyramid`]: segment sampling, frame encoder and the three-level
//!   relational feature pyramid.
//! * [`ada`]: transport cost, surrogate objectives, the maximization phase and
//!   the on-the-fly minimax training step.
//! * [`synthdg`]: procedural video domain-generalization benchmark and the
//!   `VDG1` dataset format.
//! * [`harness`]: experiment configuration, training loops, gradient checks
//!   and metrics.

pub mod ada;
pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod optim;
pub mod params;
pub mod pyramid;
pub mod rng;
pub mod synthdg;
pub mod tape;
pub mod tensor;

pub use error::{ApnError, Result};
pub use tape::{Gradients, LeafKind, Tape, Var};
pub use tensor::{DType, Tensor};
