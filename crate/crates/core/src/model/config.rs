use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::StructuredMode;
use crate::patchio::{Geometry, Modality};

/// How the per-stream masks of one sample relate to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPolicy {
    /// Pairwise-disjoint unmasked sets.
    Complementary,
    /// Independent uniform draws.
    Overlapping,
    /// Independent structured audio masks; video stays uniform.
    Structured(StructuredMode),
    /// Every stream reuses the first stream's masks (diagnostics only).
    Identical,
}

/// Which embeddings the self-distillation term compares across streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KdScope {
    /// Meanpooled joint-pass output only.
    #[default]
    JointOnly,
    /// Joint output plus the audio-encoder and video-encoder meanpools.
    JointAudioVideo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub geometry: Geometry,
    pub dim: usize,
    pub enc_heads: usize,
    pub ae_layers: usize,
    pub ve_layers: usize,
    pub ave_layers: usize,
    /// Decoder layers shared by both modalities; one modality-specific layer follows.
    pub jd_shared_layers: usize,
    pub jd_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub n_streams: usize,
    pub mask_policy: MaskPolicy,
    /// Contrastive temperature.
    pub tau: f64,
    pub kd_scope: KdScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl ModelConfig {
    /// Desk-scale preset: width 32, 2+2+1 encoder layers, 2+1 decoder layers.
    pub fn toy() -> Self {
        Self {
            geometry: Geometry::toy(),
            dim: 32,
            enc_heads: 4,
            ae_layers: 2,
            ve_layers: 2,
            ave_layers: 1,
            jd_shared_layers: 2,
            jd_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            n_streams: 2,
            mask_policy: MaskPolicy::Complementary,
            tau: 0.05,
            kd_scope: KdScope::JointOnly,
        }
    }

    /// ViT-base sized preset on 224x224 frames and 128x1024 spectrograms.
    pub fn full_scale() -> Self {
        Self {
            geometry: Geometry::full_scale(),
            dim: 768,
            enc_heads: 12,
            ae_layers: 11,
            ve_layers: 11,
            ave_layers: 1,
            jd_shared_layers: 7,
            jd_heads: 16,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.dim == 0 || self.dim % 4 != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of 4",
                self.dim
            )));
        }
        for (what, h) in [("enc_heads", self.enc_heads), ("jd_heads", self.jd_heads)] {
            if h == 0 || self.dim % h != 0 {
                return Err(Error::Config(format!(
                    "dim {} not divisible by {what} {h}",
                    self.dim
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if !(1..=3).contains(&self.n_streams) {
            return Err(Error::Config(format!(
                "n_streams must be 1, 2 or 3, got {}",
                self.n_streams
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    /// Scalar weights in one transformer block (no qkv bias).
    pub fn block_params(&self) -> usize {
        let d = self.dim;
        let h = self.mlp_ratio * d;
        // ln1 + qkv + proj + ln2 + fc1 + fc2
        2 * d + 3 * d * d + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    }

    /// Closed-form size of the parameter tree.
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        let pa = self.geometry.token_len(Modality::Audio);
        let pv = self.geometry.token_len(Modality::Video);
        let blocks =
            self.ae_layers + self.ve_layers + self.ave_layers + self.jd_shared_layers + 2;
        let encoder_in = (pa * d + d) + (pv * d + d) + 2 * d;
        let joint_norm = if self.ave_layers > 0 { 2 * d } else { 0 };
        let decoder_in = 2 * d + 2 * d; // mask tokens, decoder type embeddings
        let heads = 2 * (2 * d) + (d * pa + pa) + (d * pv + pv);
        encoder_in + joint_norm + decoder_in + heads + blocks * self.block_params()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_divisibility() {
        let cfg = ModelConfig {
            dim: 30,
            ..ModelConfig::toy()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig::full_scale().validate().is_ok());
    }
}
