use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthbench::MotionKind;

/// How encoder features are brought into the driving pose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Explicit warp by a mask-blended dense flow.
    DenseMotion,
    /// No explicit warp; the encoder sees both frames and mixes implicitly.
    NeuralMix,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::DenseMotion => "dense_motion",
            Variant::NeuralMix => "neural_mix",
        }
    }
}

/// Architecture, optimizer and data settings. Serialized as snake_case JSON;
/// omitted keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub variant: Variant,
    pub transform: MotionKind,
    pub image_size: usize,
    /// Output widths of the three stride-2 encoder blocks.
    pub encoder_widths: [usize; 3],
    /// Number of 1x1 conv layers after the downsampling blocks.
    pub projection_layers: usize,
    /// Feature channels C entering the decoder.
    pub feature_channels: usize,
    pub residual_blocks: usize,
    /// Output widths of the three upsampling blocks.
    pub decoder_widths: [usize; 3],
    pub output_kernel: usize,
    pub expression_dim: usize,
    pub mod_eps: f64,
    pub eps_cov: f64,
    pub tps_reg: f64,
    /// Weight of the perceptual term.
    pub lambda: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Training scenes generated when no dataset is supplied.
    pub dataset_size: usize,
    pub heldout_size: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            variant: Variant::DenseMotion,
            transform: MotionKind::Affine,
            image_size: 64,
            encoder_widths: [32, 64, 128],
            projection_layers: 2,
            feature_channels: 128,
            residual_blocks: 6,
            decoder_widths: [64, 32, 16],
            output_kernel: 7,
            expression_dim: crate::synthbench::EXPRESSION_DIM,
            mod_eps: crate::modconv::DEFAULT_MOD_EPS,
            eps_cov: crate::geometry::DEFAULT_EPS_COV,
            tps_reg: 0.0,
            lambda: 0.0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            steps: 2000,
            seed: 42,
            dataset_size: 200,
            heldout_size: 20,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Spatial extent of encoder features.
    pub fn feature_extent(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || !self.image_size.is_multiple_of(8) {
            return bad(format!("image_size must be a positive multiple of 8, got {}", self.image_size));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.feature_channels == 0 || self.expression_dim == 0 {
            return bad("feature_channels and expression_dim must be positive".into());
        }
        if self.output_kernel.is_multiple_of(2) {
            return bad(format!("output_kernel must be odd, got {}", self.output_kernel));
        }
        if !(self.mod_eps >= 0.0) || !(self.eps_cov >= 0.0) || !(self.tps_reg >= 0.0) {
            return bad("eps values and tps_reg must be >= 0".into());
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.dataset_size == 0 {
            return bad("dataset_size must be positive".into());
        }
        Ok(())
    }
}
