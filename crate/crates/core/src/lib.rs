//! Geometric disentanglement for gradient-based unlearning.
//!
//! Forget gradients are split, under an optimizer-induced diagonal metric
//! `H`, into a component tangent to the span of retain gradients and a
//! component `H`-orthogonal to it. Only the orthogonal part (plus an
//! optional sign-selected, capped tangential part) drives forgetting, so
//! the retain loss is unchanged to first order.
//!
//! Module map:
//! - [`metric`]: diagonal SPD metric, whitening, H-gradients
//! - [`subspace`]: retain basis and projectors
//! - [`gu_step`]: update composition (practical and theory forms)
//! - [`analysis`]: first-order identities, sufficient conditions, bounds
//! - [`models`]: differentiable test objectives and synthetic tasks
//! - [`optimizer`]: SGD and Adam with a metric snapshot
//! - [`harness`]: unlearning episodes, theory audit, variant comparison
//! - [`config`] / [`cli`]: key=value configs and the `gu` command line

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod error;
pub mod gu_step;
pub mod harness;
pub mod linalg;
pub mod metric;
pub mod models;
pub mod optimizer;
pub mod oracle;
pub mod selftest;
pub mod subspace;

pub use error::{GuError, Result};
pub use gu_step::{GradientBundle, GuConfig, StepReport};
pub use metric::DiagonalMetric;
pub use subspace::RetainBasis;
