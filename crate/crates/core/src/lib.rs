//! Black-box identification of the decoding strategy behind a text-generation
//! endpoint: top-k versus nucleus (top-p) sampling, and the value of `k` or `p`.
//!
//! The toolkit only needs query access to an [`Endpoint`](blackbox::Endpoint)
//! that returns single-step responses. A [`SimulatedSystem`](blackbox::SimulatedSystem)
//! with a known strategy serves as ground truth for every estimator.

pub mod blackbox;
pub mod distmatch;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod prompts;

pub use distributions::{Categorical, DecodingStrategy, Metric, Token, Truncation};
pub use error::{Error, Result};
pub use estimators::{EstimatorConfig, KEstimate, PEstimate, StrategyVerdict, Verdict};
pub use prompts::{PromptSpec, RenderedPrompt};
