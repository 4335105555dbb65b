use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Which statistics batch-norm layers use at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Running,
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_timepoints: usize,
    pub n_classes: usize,
    pub temporal_filters: usize,
    pub depth_multiplier: usize,
    pub temporal_kernel_len: usize,
    pub separable_kernel_len: usize,
    pub pool1: usize,
    pub pool2: usize,
    pub dropout_rate: f32,
    pub bn_momentum: f32,
    pub bn_mode: BnMode,
}

impl ModelConfig {
    /// Desk-scale miniature: F1=4, D=2, temporal kernel 32, pools 4 and 8.
    pub fn desk(n_channels: usize, n_timepoints: usize, n_classes: usize) -> Self {
        ModelConfig {
            n_channels,
            n_timepoints,
            n_classes,
            temporal_filters: 4,
            depth_multiplier: 2,
            temporal_kernel_len: 32,
            separable_kernel_len: 16,
            pool1: 4,
            pool2: 8,
            dropout_rate: 0.25,
            bn_momentum: 0.1,
            bn_mode: BnMode::Running,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.n_channels >= 1 && self.n_classes >= 2,
            Validation,
            "model needs >= 1 channel and >= 2 classes"
        );
        ensure!(
            self.temporal_filters >= 1 && self.depth_multiplier >= 1,
            Validation,
            "temporal_filters and depth_multiplier must be >= 1"
        );
        ensure!(
            self.temporal_kernel_len >= 1 && self.separable_kernel_len >= 1,
            Validation,
            "kernel lengths must be >= 1"
        );
        ensure!(
            self.pool1 >= 1 && self.pool2 >= 1,
            Validation,
            "pool sizes must be >= 1"
        );
        ensure!(
            self.n_timepoints % (self.pool1 * self.pool2) == 0 && self.n_timepoints >= self.pool1 * self.pool2,
            Validation,
            "t = {} must be a positive multiple of pool1·pool2 = {}",
            self.n_timepoints,
            self.pool1 * self.pool2
        );
        ensure!(
            (0.0..1.0).contains(&self.dropout_rate),
            Validation,
            "dropout rate {} outside [0, 1)",
            self.dropout_rate
        );
        ensure!(
            self.bn_momentum > 0.0 && self.bn_momentum <= 1.0,
            Validation,
            "bn momentum {} outside (0, 1]",
            self.bn_momentum
        );
        Ok(())
    }

    pub fn n_spatial_maps(&self) -> usize {
        self.temporal_filters * self.depth_multiplier
    }

    /// Width of the flattened feature vector fed to the dense layer.
    pub fn feature_len(&self) -> usize {
        self.n_spatial_maps() * self.n_timepoints / (self.pool1 * self.pool2)
    }

    pub fn with_bn_mode(mut self, mode: BnMode) -> Self {
        self.bn_mode = mode;
        self
    }
}
