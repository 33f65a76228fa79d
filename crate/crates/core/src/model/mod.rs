//! The two-stage forecasting model and its configuration.
//!
//! Stage one ([`gridgen`]) turns past-trajectory grids and the scene crop
//! into per-step occupancy probability grids. Stage two ([`sampler`]) reads
//! those grids and regresses K explicit trajectories.

pub mod checkpoint;
pub mod gridgen;
pub mod sampler;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Configuration of the probability-grid generator.
///
/// Defaults follow the reference configuration: grid 128, 8 past and 12
/// future steps, 7 U-Net blocks, 9 residual blocks, a 20-channel fused
/// feature split 10/10, ConvLSTM with 16 hidden channels and an 11x11
/// kernel, LeakyReLU slope 0.2, dropout 0.5, Gaussian init std 0.02.
/// Channel widths of the encoders are implementation knobs, not contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridGenConfig {
    pub n: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub unet_blocks: usize,
    pub resnet_blocks: usize,
    pub traj_feat_channels: usize,
    pub scene_feat_channels: usize,
    pub unet_base_channels: usize,
    pub resnet_base_channels: usize,
    pub convlstm_hidden: usize,
    pub convlstm_kernel: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub init_std: f64,
    pub positive_class_weight: f64,
}

impl Default for GridGenConfig {
    fn default() -> Self {
        Self {
            n: 128,
            t_h: 8,
            t_f: 12,
            unet_blocks: 7,
            resnet_blocks: 9,
            traj_feat_channels: 10,
            scene_feat_channels: 10,
            unet_base_channels: 16,
            resnet_base_channels: 32,
            convlstm_hidden: 16,
            convlstm_kernel: 11,
            dropout: 0.5,
            leaky_slope: 0.2,
            init_std: 0.02,
            positive_class_weight: 1024.0,
        }
    }
}

impl GridGenConfig {
    /// A small configuration for desk-scale runs and tests: 32-cell grids,
    /// five U-Net blocks, narrow channels, short ConvLSTM kernel. The fused
    /// feature keeps the 20-channel contract.
    pub fn desk(n: usize) -> Self {
        let unet_blocks = (n as f64).log2() as usize;
        Self {
            n,
            unet_blocks: unet_blocks.min(5),
            resnet_blocks: 4,
            unet_base_channels: 8,
            resnet_base_channels: 16,
            convlstm_hidden: 8,
            convlstm_kernel: 3,
            positive_class_weight: 256.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.traj_feat_channels + self.scene_feat_channels != 20 {
            return err(format!(
                "trajectory + scene feature channels must equal 20, got {} + {}",
                self.traj_feat_channels, self.scene_feat_channels
            ));
        }
        for (name, v) in [
            ("n", self.n),
            ("t_h", self.t_h),
            ("t_f", self.t_f),
            ("resnet_blocks", self.resnet_blocks),
            ("traj_feat_channels", self.traj_feat_channels),
            ("scene_feat_channels", self.scene_feat_channels),
            ("unet_base_channels", self.unet_base_channels),
            ("resnet_base_channels", self.resnet_base_channels),
            ("convlstm_hidden", self.convlstm_hidden),
        ] {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.unet_blocks < 2 {
            return err(format!("unet_blocks must be at least 2, got {}", self.unet_blocks));
        }
        if self.n % (1 << self.unet_blocks) != 0 {
            return err(format!(
                "grid size {} must be divisible by 2^{} = {} for the U-Net",
                self.n,
                self.unet_blocks,
                1usize << self.unet_blocks
            ));
        }
        if self.n % 4 != 0 {
            return err(format!("grid size {} must be divisible by 4 for the scene encoder", self.n));
        }
        if self.convlstm_kernel % 2 == 0 {
            return err(format!("convlstm_kernel must be odd, got {}", self.convlstm_kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.init_std > 0.0) {
            return err(format!("init_std must be positive, got {}", self.init_std));
        }
        if !(self.positive_class_weight > 0.0) {
            return err(format!("positive_class_weight must be positive, got {}", self.positive_class_weight));
        }
        Ok(())
    }
}

/// Configuration of the trajectory sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub k: usize,
    pub n: usize,
    pub t_f: usize,
    pub convlstm_hidden: usize,
    pub convlstm_kernel: usize,
    pub pool_size: usize,
    /// Optional hidden layer between the pooled features and the 2K output
    /// row; `None` is a single fully connected layer.
    pub fc_hidden: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: 5,
            n: 128,
            t_f: 12,
            convlstm_hidden: 16,
            convlstm_kernel: 11,
            pool_size: 8,
            fc_hidden: None,
        }
    }
}

impl SamplerConfig {
    pub fn desk(n: usize) -> Self {
        Self {
            n,
            convlstm_hidden: 8,
            convlstm_kernel: 3,
            pool_size: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.k == 0 {
            return err("k must be at least 1".into());
        }
        if self.t_f == 0 || self.n == 0 || self.convlstm_hidden == 0 {
            return err("t_f, n and convlstm_hidden must be positive".into());
        }
        if self.convlstm_kernel % 2 == 0 {
            return err(format!("convlstm_kernel must be odd, got {}", self.convlstm_kernel));
        }
        if self.pool_size == 0 || self.n % self.pool_size != 0 {
            return err(format!("pool_size {} must divide grid size {}", self.pool_size, self.n));
        }
        Ok(())
    }
}

/// `t_f` grids of per-cell occupancy probabilities from stage one.
#[derive(Debug, Clone)]
pub struct ProbabilityGridSequence {
    /// `(t_f, N, N)`, every value in `[0, 1]`.
    pub probs: Array3<f64>,
}

impl ProbabilityGridSequence {
    pub fn t_f(&self) -> usize {
        self.probs.dim().0
    }

    pub fn n(&self) -> usize {
        self.probs.dim().1
    }
}
