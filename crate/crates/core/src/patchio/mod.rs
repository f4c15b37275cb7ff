//! Patch tokenization, positional tables, synthetic paired data and the
//! `.avt` dataset file.
//!
//! Patch flattening order is fixed as channel-major, then row-major inside
//! the patch; decoder targets use the same order.

mod avt;
mod sincos;
mod synth;

use serde::{Deserialize, Serialize};

pub use avt::{read_avt, write_avt, AVT_MAGIC, AVT_VERSION};
pub use sincos::{sinusoidal_2d, EmbeddingTables};
pub use synth::synth_dataset;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Variance floor used when standardizing reconstruction targets.
pub const TARGET_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Audio,
    Video,
}

/// Channel-major `[channels x height x width]` grid of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Grid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels * height * width != data.len() || data.is_empty() {
            return Err(Error::Shape(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// One paired data point. Audio is a single-channel `[features x time]` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AVSample {
    pub video: Grid,
    pub audio: Grid,
    pub label: Option<u32>,
}

impl AVSample {
    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        if self.video.shape() != geometry.video_shape() || self.audio.shape() != geometry.audio_shape()
        {
            return Err(Error::Config(format!(
                "sample shapes video {:?} audio {:?} do not match geometry video {:?} audio {:?}",
                self.video.shape(),
                self.audio.shape(),
                geometry.video_shape(),
                geometry.audio_shape()
            )));
        }
        if !self.video.data.iter().chain(&self.audio.data).all(|v| v.is_finite()) {
            return Err(Error::Numeric("sample contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Input geometry shared by the data pipeline and the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub video_channels: usize,
    pub video_height: usize,
    pub video_width: usize,
    /// Spectrogram feature (frequency) rows.
    pub audio_features: usize,
    /// Spectrogram time columns.
    pub audio_frames: usize,
    pub patch: usize,
}

impl Default for Geometry {
    fn default() -> Self {
        Self::toy()
    }
}

impl Geometry {
    /// Desk-scale geometry: 16 video tokens and 16 audio tokens.
    pub fn toy() -> Self {
        Self {
            video_channels: 1,
            video_height: 32,
            video_width: 32,
            audio_features: 16,
            audio_frames: 64,
            patch: 8,
        }
    }

    /// 224x224 RGB frame and 128x1024 spectrogram with 16x16 patches.
    pub fn full_scale() -> Self {
        Self {
            video_channels: 3,
            video_height: 224,
            video_width: 224,
            audio_features: 128,
            audio_frames: 1024,
            patch: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.patch;
        let dims = [
            self.video_channels,
            self.video_height,
            self.video_width,
            self.audio_features,
            self.audio_frames,
            p,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("geometry has a zero dimension: {self:?}")));
        }
        for (what, d) in [
            ("video_height", self.video_height),
            ("video_width", self.video_width),
            ("audio_features", self.audio_features),
            ("audio_frames", self.audio_frames),
        ] {
            if d % p != 0 {
                return Err(Error::Config(format!(
                    "{what} {d} not divisible by patch size {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn video_shape(&self) -> [usize; 3] {
        [self.video_channels, self.video_height, self.video_width]
    }

    pub fn audio_shape(&self) -> [usize; 3] {
        [1, self.audio_features, self.audio_frames]
    }

    pub fn video_grid(&self) -> (usize, usize) {
        (self.video_height / self.patch, self.video_width / self.patch)
    }

    /// `(frequency rows, time columns)` of the audio patch grid.
    pub fn audio_grid(&self) -> (usize, usize) {
        (self.audio_features / self.patch, self.audio_frames / self.patch)
    }

    pub fn tokens(&self, m: Modality) -> usize {
        let (h, w) = match m {
            Modality::Audio => self.audio_grid(),
            Modality::Video => self.video_grid(),
        };
        h * w
    }

    pub fn token_len(&self, m: Modality) -> usize {
        let c = match m {
            Modality::Audio => 1,
            Modality::Video => self.video_channels,
        };
        c * self.patch * self.patch
    }
}

/// Patch token sequence of one modality in raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    /// `[grid_h * grid_w x patch^2 * channels]`
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
    pub modality: Modality,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Splits a grid into non-overlapping `patch x patch` tiles in raster order.
pub fn patchify(grid: &Grid, patch: usize, modality: Modality) -> Result<TokenGrid> {
    if patch == 0 || grid.height % patch != 0 || grid.width % patch != 0 {
        return Err(Error::Shape(format!(
            "grid {}x{} not divisible by patch size {patch}",
            grid.height, grid.width
        )));
    }
    let gh = grid.height / patch;
    let gw = grid.width / patch;
    let len = grid.channels * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * len);
    for py in 0..gh {
        for px in 0..gw {
            for c in 0..grid.channels {
                for y in 0..patch {
                    for x in 0..patch {
                        data.push(grid.at(c, py * patch + y, px * patch + x) as f64);
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        tokens: Tensor::new(vec![gh * gw, len], data)?,
        grid_h: gh,
        grid_w: gw,
        modality,
    })
}

/// Inverse of [`patchify`].
pub fn depatchify(tokens: &TokenGrid, patch: usize) -> Result<Grid> {
    let n = tokens.grid_h * tokens.grid_w;
    let len = tokens.tokens.cols();
    if patch == 0 || tokens.tokens.rows() != n || len % (patch * patch) != 0 {
        return Err(Error::Shape(format!(
            "{} tokens of length {len} inconsistent with a {}x{} grid of {patch}x{patch} patches",
            tokens.tokens.rows(),
            tokens.grid_h,
            tokens.grid_w
        )));
    }
    let channels = len / (patch * patch);
    let mut grid = Grid::zeros(channels, tokens.grid_h * patch, tokens.grid_w * patch);
    let src = tokens.tokens.data();
    let mut k = 0;
    for py in 0..tokens.grid_h {
        for px in 0..tokens.grid_w {
            for c in 0..channels {
                for y in 0..patch {
                    for x in 0..patch {
                        *grid.at_mut(c, py * patch + y, px * patch + x) = src[k] as f32;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(grid)
}

/// Per-patch standardization: zero mean, unit variance, variance floored.
pub fn normalize_patch_target(patch: &[f64]) -> Vec<f64> {
    let n = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let var = patch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.max(TARGET_VAR_FLOOR).sqrt();
    patch.iter().map(|x| (x - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_patch_target(&[0.0, 2.0]), vec![-1.0, 1.0]);
        assert_eq!(normalize_patch_target(&[3.0; 5]), vec![0.0; 5]);
    }

    #[test]
    fn geometry_token_counts() {
        let g = Geometry::full_scale();
        assert_eq!(g.tokens(Modality::Video), 196);
        assert_eq!(g.tokens(Modality::Audio), 512);
        assert_eq!(g.token_len(Modality::Video), 768);
        assert_eq!(g.token_len(Modality::Audio), 256);
        let t = Geometry::toy();
        assert_eq!((t.tokens(Modality::Video), t.tokens(Modality::Audio)), (16, 16));
        let bad = Geometry { patch: 7, ..t };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
