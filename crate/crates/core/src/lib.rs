//! Grid-based multimodal trajectory forecasting.
//!
//! The pipeline turns agent tracks and a bird's-eye-view scene image into
//! agent-centric grid tensors, runs a two-stage model (per-step occupancy
//! probability grids, then K explicit trajectories sampled from them), and
//! scores predictions with displacement and scene-compliance metrics.

pub mod grid;
pub mod nn;

pub use grid::{GridGeometry, GridSample, Point, Trajectory};
