use rayon::prelude::*;

use super::{AVSample, Geometry, Grid};
use crate::error::{Error, Result};
use crate::rng::{stream, KeyedRng};

/// Width (in frequency rows) of the Gaussian band profile.
const BAND_SIGMA: f64 = 1.0;

struct ClassLayout {
    /// Video blob centers `(y, x)` in pixels, one per class.
    blob_centers: Vec<(f64, f64)>,
    blob_sigma: f64,
    /// Audio band center rows, one per class.
    band_rows: Vec<f64>,
}

impl ClassLayout {
    fn new(n_classes: usize, g: &Geometry) -> Result<Self> {
        let (gh, gw) = g.video_grid();
        let lattice = gh * gw;
        let band_stride = g.audio_features / n_classes.max(1);
        if n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
        }
        if n_classes > lattice || band_stride == 0 {
            return Err(Error::Config(format!(
                "{n_classes} classes exceed the distinguishable positions \
                 ({lattice} video lattice cells, {} audio rows)",
                g.audio_features
            )));
        }
        let p = g.patch as f64;
        let blob_centers = (0..n_classes)
            .map(|c| {
                let cell = c * lattice / n_classes;
                let (cy, cx) = (cell / gw, cell % gw);
                (cy as f64 * p + p / 2.0, cx as f64 * p + p / 2.0)
            })
            .collect();
        let band_rows = (0..n_classes)
            .map(|c| (c * band_stride + band_stride / 2) as f64)
            .collect();
        Ok(Self {
            blob_centers,
            blob_sigma: p / 2.0,
            band_rows,
        })
    }
}

/// Deterministic correlated audio-video pairs.
///
/// Class `c` places a Gaussian blob at the `c`-th lattice cell of the video
/// frame and a horizontal band at frequency row `c * stride + stride / 2`
/// (`stride = audio_features / n_classes`). Labels cycle through the classes.
/// Sample `i` draws its noise from the stream keyed by `(seed, i)`, so any
/// sample can be regenerated on its own.
pub fn synth_dataset(
    n_samples: usize,
    n_classes: usize,
    noise_sigma: f64,
    geometry: &Geometry,
    seed: u64,
) -> Result<Vec<AVSample>> {
    geometry.validate()?;
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Config(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    let layout = ClassLayout::new(n_classes, geometry)?;
    Ok((0..n_samples)
        .into_par_iter()
        .map(|i| make_sample(i, n_classes, noise_sigma, geometry, &layout, seed))
        .collect())
}

fn make_sample(
    index: usize,
    n_classes: usize,
    noise_sigma: f64,
    g: &Geometry,
    layout: &ClassLayout,
    seed: u64,
) -> AVSample {
    let class = index % n_classes;
    let mut rng = KeyedRng::new(seed, &[stream::SYNTH, index as u64]);

    let (by, bx) = layout.blob_centers[class];
    let s2 = 2.0 * layout.blob_sigma * layout.blob_sigma;
    let mut video = Grid::zeros(g.video_channels, g.video_height, g.video_width);
    for c in 0..g.video_channels {
        for y in 0..g.video_height {
            for x in 0..g.video_width {
                let d2 = (y as f64 - by).powi(2) + (x as f64 - bx).powi(2);
                let v = (-d2 / s2).exp() + noise_sigma * rng.normal();
                *video.at_mut(c, y, x) = v as f32;
            }
        }
    }

    let row = layout.band_rows[class];
    let mut audio = Grid::zeros(1, g.audio_features, g.audio_frames);
    for f in 0..g.audio_features {
        let profile = (-(f as f64 - row).powi(2) / (2.0 * BAND_SIGMA * BAND_SIGMA)).exp();
        for t in 0..g.audio_frames {
            *audio.at_mut(0, f, t) = (profile + noise_sigma * rng.normal()) as f32;
        }
    }

    AVSample {
        video,
        audio,
        label: Some(class as u32),
    }
}
