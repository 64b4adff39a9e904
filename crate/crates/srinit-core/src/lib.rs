//! Layer pruning for residual networks driven by stochastic re-initialization.
//!
//! The toolkit scores each residual block of a trained network by the top-1
//! accuracy drop caused by re-sampling that block's parameters from their
//! initialization distribution, prunes the blocks whose drop stays below a
//! threshold, fine-tunes the shallower model, and reports parameter/FLOP
//! reductions together with interpretability visualizations.
//!
//! Modules map one-to-one onto the pipeline stages:
//!
//! - [`netcore`] — network description, block enumeration, layer surgery,
//!   and the versioned checkpoint container.
//! - [`srinit`] — the scoring procedure itself: per-unit re-initialization,
//!   estimation-model evaluation, drop profiles, and threshold selection.
//! - [`trainer`] — dataset ingestion plus baseline training and
//!   post-surgery fine-tuning.
//! - [`metrics`] — parameter/FLOP accounting and structured result reports.
//! - [`interpret`] — Grad-CAM and guided backpropagation on the original and
//!   re-initialized models.
//! - [`pipeline`] / [`config`] — orchestration of the whole run from a
//!   single config file, producing restartable file artifacts.

pub mod config;
pub mod error;
pub mod interpret;
pub mod metrics;
pub mod netcore;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod srinit;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
