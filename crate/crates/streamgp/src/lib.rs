//! Streaming sparse Gaussian-process regression whose online training
//! objective is an online PAC-Bayes train bound, producing per-step
//! generalization-bound certificates alongside predictions.
//!
//! The crate is organized around the pieces of that loop:
//!
//! - [`kernels`] — kernel evaluation, jittered Cholesky factorization, and
//!   analytic hyperparameter gradients;
//! - [`exact`] — exact GP posterior and log marginal likelihood, used both as
//!   a correctness oracle and for hyperparameter pretraining;
//! - [`streaming`] — the inducing-point variational state, its predictive
//!   distribution, prior snapshots, and the Gaussian KL between steps;
//! - [`pacbayes`] — the bounded-loss family, closed-form Gaussian
//!   expectations of each loss, and the train/test bound assembly;
//! - [`trainer`] — pretraining, the per-batch online optimization step (with
//!   Adam and a reverse-mode tape for gradients), checkpointing, and the
//!   stream driver;
//! - [`data`] — synthetic generators, CSV ingestion, normalization, and
//!   stream construction;
//! - [`cli`] — the `run` / `compare` / `report` / `fetch` experiment
//!   commands behind the `streamgp` binary.
//!
//! See the crate examples for one runnable program per capability.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod exact;
pub mod kernels;
pub mod pacbayes;
pub mod streaming;
pub mod trainer;

pub use error::{Error, Result};
pub use exact::GaussianPosterior;
pub use kernels::{KernelFamily, KernelParams};
pub use pacbayes::{BoundReport, LossKind, LossSpec};
