//! Stochastic attention-logit regularisers on a small reverse-mode
//! transformer stack.
//!
//! * [`tensor`]: dense tensors and the autodiff tape.
//! * [`attention`]: multi-head scaled dot-product attention.
//! * [`drop`]: top-k hard masking, Gaussian logit smoothing and the
//!   two-pass consistency loss.
//! * [`theory`]: PAC-Bayes calculator and gradient-variance decomposition.
//! * [`harness`]: synthetic tasks, model, training loop and metrics.
//! * [`cli`]: the `attndrop` command.

pub mod attention;
pub mod cli;
pub mod drop;
pub mod error;
pub mod harness;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use tensor::{Graph, Tensor, Var};
