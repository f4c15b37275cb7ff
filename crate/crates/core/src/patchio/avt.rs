//! `.avt` dataset files.
//!
//! Layout: 8-byte magic `AVTENS01`, a little-endian `u32` manifest length,
//! the UTF-8 JSON manifest, then for every sample the video payload and the
//! audio payload as little-endian `f32` in row-major order, followed by a
//! little-endian `u32` label when `has_labels` is set. No padding.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AVSample, Grid};
use crate::error::{Error, Result};

pub const AVT_MAGIC: &[u8; 8] = b"AVTENS01";
pub const AVT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    count: usize,
    video_shape: [usize; 3],
    audio_shape: [usize; 2],
    has_labels: bool,
    dtype: String,
}

pub fn write_avt(path: impl AsRef<Path>, samples: &[AVSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot write an empty dataset".into()))?;
    let video_shape = first.video.shape();
    let audio_shape = [first.audio.height, first.audio.width];
    let has_labels = first.label.is_some();
    for (i, s) in samples.iter().enumerate() {
        if s.video.shape() != video_shape
            || s.audio.channels != 1
            || [s.audio.height, s.audio.width] != audio_shape
        {
            return Err(Error::Shape(format!("sample {i} differs in shape from sample 0")));
        }
        if s.label.is_some() != has_labels {
            return Err(Error::Contract(format!(
                "sample {i} label presence differs from sample 0"
            )));
        }
    }
    let manifest = Manifest {
        version: AVT_VERSION,
        count: samples.len(),
        video_shape,
        audio_shape,
        has_labels,
        dtype: "f32le".into(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let per_sample = 4 * (first.video.data.len() + first.audio.data.len()) + 4 * has_labels as usize;
    let mut buf = Vec::with_capacity(12 + json.len() + per_sample * samples.len());
    buf.extend_from_slice(AVT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in samples {
        for v in s.video.data.iter().chain(&s.audio.data) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(l) = s.label {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_avt(path: impl AsRef<Path>) -> Result<Vec<AVSample>> {
    let bytes = fs::read(path)?;
    parse_avt(&bytes)
}

fn parse_avt(bytes: &[u8]) -> Result<Vec<AVSample>> {
    if bytes.len() < 8 || &bytes[..8] != AVT_MAGIC {
        let n = bytes.len().min(8);
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(AVT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    if bytes.len() < 12 {
        return Err(Error::MalformedHeader("missing manifest length".into()));
    }
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes
        .get(12..12 + mlen)
        .ok_or_else(|| Error::MalformedHeader(format!("manifest length {mlen} exceeds file")))?;
    let manifest: Manifest = serde_json::from_slice(body)
        .map_err(|e| Error::MalformedHeader(format!("manifest JSON: {e}")))?;
    if manifest.version != AVT_VERSION {
        return Err(Error::VersionMismatch {
            expected: AVT_VERSION,
            found: manifest.version,
        });
    }
    if manifest.dtype != "f32le" {
        return Err(Error::MalformedHeader(format!("unsupported dtype {}", manifest.dtype)));
    }
    let [vc, vh, vw] = manifest.video_shape;
    let [af, at] = manifest.audio_shape;
    let nv = vc * vh * vw;
    let na = af * at;
    if nv == 0 || na == 0 {
        return Err(Error::MalformedHeader("zero-sized sample shape".into()));
    }
    let per_sample = 4 * (nv + na) + if manifest.has_labels { 4 } else { 0 };
    let payload = &bytes[12 + mlen..];
    let expected = per_sample
        .checked_mul(manifest.count)
        .ok_or_else(|| Error::MalformedHeader("sample count overflows".into()))?;
    if payload.len() < expected {
        return Err(Error::Truncated(format!(
            "manifest declares {} samples ({expected} bytes), payload has {} bytes",
            manifest.count,
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last sample",
            payload.len() - expected
        )));
    }
    let floats = |chunk: &[u8]| -> Vec<f32> {
        chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect()
    };
    let mut out = Vec::with_capacity(manifest.count);
    for rec in payload.chunks_exact(per_sample) {
        let video = Grid::new(vc, vh, vw, floats(&rec[..4 * nv]))?;
        let audio = Grid::new(1, af, at, floats(&rec[4 * nv..4 * (nv + na)]))?;
        let label = manifest
            .has_labels
            .then(|| u32::from_le_bytes(rec[4 * (nv + na)..].try_into().unwrap()));
        out.push(AVSample {
            video,
            audio,
            label,
        });
    }
    Ok(out)
}
