//! Spatiotemporal sequence forecasting.
//!
//! A multivariate series of `L` timesteps and `N` variables is flattened
//! into `L * N` tokens, one per (timestep, variable) pair, and modelled by an
//! encoder-decoder attention network that learns joint space-time
//! relationships. The crate carries everything needed end to end: a small
//! autodiff tensor library, data handling, embeddings, exact and
//! random-feature attention, the forecaster itself, training and evaluation,
//! and a linear autoregressive baseline.

pub mod attention;
pub mod baselines;
pub mod checkpoint;
pub mod dataflow;
pub mod embedding;
pub mod error;
pub mod forecaster;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
