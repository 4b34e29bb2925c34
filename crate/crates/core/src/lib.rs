//! Multi-agent trajectory forecasting on a desk-scale budget.
//!
//! Three cooperating networks predict future agent positions from observed
//! tracks, a rasterized map, and an optional ego motion plan:
//!
//! * an interaction net summarizes the scene around each agent with a GRU
//!   over pooled per-agent features,
//! * an environment net embeds a bird's-eye map raster with a small CNN and
//!   exposes per-position patches via ROIAlign,
//! * a prediction net rolls an encoder/decoder LSTM over displacements and
//!   emits `H` candidate trajectories per agent.
//!
//! Everything runs on plain `f64` buffers with a tape-based autodiff graph;
//! no GPU, no threads. Baselines (linear extrapolation, a constant-velocity
//! Kalman filter, vanilla LSTMs), metrics, and a small training harness
//! round out the crate.

pub mod ain;
pub mod baselines;
pub mod config;
pub mod envnet;
pub mod gradcheck;
pub mod map;
pub mod metrics;
pub mod params;
pub mod prednet;
pub mod rnn;
pub mod scene;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Tensor, TensorError, TensorId};
