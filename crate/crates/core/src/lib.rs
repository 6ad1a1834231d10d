//! Cross-silo federated learning at desk scale.
//!
//! The crate trains a small masked-token model over synthetic, strongly
//! non-i.i.d. "language" silos with hierarchical optimisation: stateless SGD
//! on every silo, a persistent optimiser on the server consuming weighted
//! pseudo-gradients. Around that loop sit
//!
//! - [`data`]: synthetic corpora and the per-round sampling rule,
//! - [`secure`]: pairwise mask-cancelling secure summation,
//! - [`personalize`]: local fine-tuning plus interpolation with the global model,
//! - [`fedopt`]: the federated loop and the pooled / per-silo baselines,
//! - [`commands`]: the operations behind the `fedsilo` binary.
//!
//! Runnable walkthroughs live in the crate's `examples/` directory.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fedopt;
pub mod log;
pub mod model;
pub mod param;
pub mod personalize;
pub mod secure;
pub mod seed;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use param::ParamVector;
