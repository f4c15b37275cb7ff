use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::Geometry;

/// Fixed 2D sine/cosine table, one row per raster position.
///
/// The first half of the channels encodes the row index and the second half
/// the column index; each half is `[sin(pos * w_k) .. | cos(pos * w_k) ..]`
/// with `w_k = 10000^(-k / (dim/4))`.
pub fn sinusoidal_2d(grid_h: usize, grid_w: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 4 != 0 {
        return Err(Error::Config(format!(
            "sinusoidal embedding width {dim} must be a positive multiple of 4"
        )));
    }
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::Config("empty positional grid".into()));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut data = Vec::with_capacity(grid_h * grid_w * dim);
    for r in 0..grid_h {
        for c in 0..grid_w {
            for pos in [r as f64, c as f64] {
                data.extend(omega.iter().map(|w| (pos * w).sin()));
                data.extend(omega.iter().map(|w| (pos * w).cos()));
            }
        }
    }
    Tensor::new(vec![grid_h * grid_w, dim], data)
}

/// Positional tables for encoder and decoder inputs. The trainable
/// modality-type vectors live in the parameter tree.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTables {
    pub pos_audio: Tensor,
    pub pos_video: Tensor,
    pub pos_audio_dec: Tensor,
    pub pos_video_dec: Tensor,
}

impl EmbeddingTables {
    pub fn new(geometry: &Geometry, dim: usize, dec_dim: usize) -> Result<Self> {
        let (ah, aw) = geometry.audio_grid();
        let (vh, vw) = geometry.video_grid();
        Ok(Self {
            pos_audio: sinusoidal_2d(ah, aw, dim)?,
            pos_video: sinusoidal_2d(vh, vw, dim)?,
            pos_audio_dec: sinusoidal_2d(ah, aw, dec_dim)?,
            pos_video_dec: sinusoidal_2d(vh, vw, dec_dim)?,
        })
    }
}
