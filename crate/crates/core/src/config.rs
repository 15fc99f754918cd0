//! Run configuration, serialized as flat JSON.
//!
//! Defaults are the desk-scale setting: 64x64 images, 16x16 features and a
//! small trainable encoder. The full-scale values used with a ResNet50
//! backbone at 473x473 are noted beside fields where they differ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weight applied to each query region's matching scores in the prior mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfActivation {
    /// `<r_q, r_q>`, the squared norm.
    InnerProduct,
    /// `||r_q||_2`.
    L2,
}

/// Reduction of a block-pair correlation over support positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrReduce {
    Max,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Dataset directory written by `gen-data`.
    pub data_dir: Option<String>,
    /// Input resolution (full scale: 473).
    pub image_size: usize,
    pub n_classes: usize,
    pub n_folds: usize,
    /// Held-out fold.
    pub fold: usize,
    /// Shots per episode.
    pub k: usize,

    pub stem_channels: usize,
    /// Encoder stride; features are `image_size / downsample` on a side.
    pub downsample: usize,
    /// Channel widths of the low/mid/high stages (full scale: 512/1024/2048).
    pub c_low: usize,
    pub c_mid: usize,
    pub c_high: usize,
    /// Block counts of the low/mid/high stages.
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub d_text: usize,
    pub freeze_backbone: bool,

    /// Region pooling windows as `[d_h, d_w]`.
    pub windows: Vec<[usize; 2]>,
    pub kernel: SelfActivation,

    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub tau4: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Attention logits are divided by `sqrt(d_scale)`.
    pub d_scale: f64,
    pub ffn_mult: usize,
    pub share_align_params: bool,

    /// Width of the fused hyper-correlation feature.
    pub n_prime: usize,
    pub corr_reduce: CorrReduce,
    pub decoder_width: usize,

    pub disable_spm: bool,
    pub disable_apa: bool,
    pub disable_tdc: bool,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before weight decay; 0 disables.
    pub grad_clip: f64,
    /// Training episodes (full scale: 200 epochs, batch 8).
    pub steps: u64,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: None,
            image_size: 64,
            n_classes: 20,
            n_folds: 4,
            fold: 0,
            k: 1,
            stem_channels: 16,
            downsample: 4,
            c_low: 32,
            c_mid: 64,
            c_high: 128,
            n1: 3,
            n2: 6,
            n3: 4,
            d_text: 300,
            freeze_backbone: false,
            windows: vec![[5, 5], [7, 1], [1, 7]],
            kernel: SelfActivation::InnerProduct,
            tau1: 0.7,
            tau2: 0.4,
            tau3: 0.40,
            tau4: 0.55,
            alpha: 0.5,
            beta: 0.5,
            d_scale: 256.0,
            ffn_mult: 4,
            share_align_params: false,
            n_prime: 48,
            corr_reduce: CorrReduce::Max,
            decoder_width: 64,
            disable_spm: false,
            disable_apa: false,
            disable_tdc: false,
            lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 5.0,
            steps: 1000,
            checkpoint_every: 0,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Spatial side of every feature map.
    pub fn feature_size(&self) -> usize {
        self.image_size / self.downsample
    }

    /// Total correlation maps, `N = N1 + N2 + N3`.
    pub fn n_corr(&self) -> usize {
        self.n1 + self.n2 + self.n3
    }

    /// Prototype width `c`; no channel reduction sits after the mid stage.
    pub fn proto_dim(&self) -> usize {
        self.c_mid
    }

    pub fn windows(&self) -> Vec<(usize, usize)> {
        self.windows.iter().map(|w| (w[0], w[1])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.downsample == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.downsample) {
            return bad(format!(
                "image_size {} must be a positive multiple of downsample {}",
                self.image_size, self.downsample
            ));
        }
        if self.n_folds == 0 || !self.n_classes.is_multiple_of(self.n_folds) || self.n_classes / self.n_folds < 2 {
            return bad(format!(
                "{} classes cannot be split into {} even folds of at least 2",
                self.n_classes, self.n_folds
            ));
        }
        if self.fold >= self.n_folds {
            return bad(format!("fold {} out of range for {} folds", self.fold, self.n_folds));
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        let widths = [self.stem_channels, self.c_low, self.c_mid, self.c_high, self.d_text];
        if widths.contains(&0) || self.n_prime == 0 || self.decoder_width == 0 || self.ffn_mult == 0 {
            return bad("channel widths must be positive".into());
        }
        if self.n1 == 0 || self.n2 == 0 || self.n3 == 0 {
            return bad("each pyramid level needs at least one block".into());
        }
        if self.windows.is_empty() || self.windows.iter().flatten().any(|&d| d == 0 || d % 2 == 0) {
            return bad(format!("pooling windows {:?} must be odd and positive", self.windows));
        }
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.tau1) || !unit(self.tau2) || !unit(self.tau3) || !unit(self.tau4) || self.tau3 >= self.tau4 {
            return bad(format!(
                "thresholds need 0 < tau1, tau2 < 1 and 0 < tau3 < tau4 < 1 (got {}, {}, {}, {})",
                self.tau1, self.tau2, self.tau3, self.tau4
            ));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.d_scale <= 0.0 {
            return bad("alpha, beta must be non-negative and d_scale positive".into());
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr, weight_decay, grad_clip must be non-negative and momentum in [0, 1)".into());
        }
        Ok(())
    }
}
