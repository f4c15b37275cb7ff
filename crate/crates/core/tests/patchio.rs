use std::fs;

use kdc_mae::numerics::Tensor;
use kdc_mae::patchio::{
    depatchify, normalize_patch_target, patchify, read_avt, sinusoidal_2d, synth_dataset,
    write_avt, Geometry, Grid, Modality, TokenGrid,
};
use kdc_mae::rng::KeyedRng;
use kdc_mae::Error;
use proptest::prelude::*;

fn random_grid(c: usize, h: usize, w: usize, seed: u64) -> Grid {
    let mut rng = KeyedRng::new(seed, &[]);
    Grid::new(c, h, w, (0..c * h * w).map(|_| rng.normal() as f32).collect()).unwrap()
}

#[test]
fn full_scale_token_counts() {
    let video = Grid::zeros(3, 224, 224);
    let t = patchify(&video, 16, Modality::Video).unwrap();
    assert_eq!((t.tokens.rows(), t.tokens.cols()), (196, 768));
    let audio = Grid::zeros(1, 128, 1024);
    let t = patchify(&audio, 16, Modality::Audio).unwrap();
    assert_eq!((t.tokens.rows(), t.tokens.cols()), (512, 256));
    assert_eq!((t.grid_h, t.grid_w), (8, 64));
}

#[test]
fn single_patch_is_the_flattened_grid() {
    let g = random_grid(1, 16, 16, 1);
    let t = patchify(&g, 16, Modality::Audio).unwrap();
    assert_eq!(t.tokens.rows(), 1);
    let flat: Vec<f64> = g.data.iter().map(|&v| v as f64).collect();
    assert_eq!(t.tokens.data(), flat.as_slice());
}

#[test]
fn flattening_is_channel_major_then_row_major() {
    // 2 channels, 2x4 grid, patch 2 -> 2 tokens of length 8
    let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
    let g = Grid::new(2, 2, 4, data).unwrap();
    let t = patchify(&g, 2, Modality::Video).unwrap();
    assert_eq!(t.tokens.row(0), &[0.0, 1.0, 4.0, 5.0, 8.0, 9.0, 12.0, 13.0]);
    assert_eq!(t.tokens.row(1), &[2.0, 3.0, 6.0, 7.0, 10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn indivisible_grid_is_a_shape_error() {
    let g = Grid::zeros(1, 10, 16);
    assert!(matches!(patchify(&g, 8, Modality::Audio), Err(Error::Shape(_))));
}

#[test]
fn round_trips_are_bitwise() {
    for (c, h, w, p) in [(1, 32, 32, 8), (1, 128, 1024, 16), (3, 16, 24, 4)] {
        let g = random_grid(c, h, w, (h * w) as u64);
        let t = patchify(&g, p, Modality::Video).unwrap();
        let back = depatchify(&t, p).unwrap();
        assert_eq!(back.shape(), g.shape());
        assert!(back.data.iter().zip(&g.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn shuffled_tokens_do_not_reconstruct() {
    let g = random_grid(1, 32, 32, 9);
    let t = patchify(&g, 8, Modality::Audio).unwrap();
    let rows = t.tokens.rows();
    let cols = t.tokens.cols();
    let mut data = Vec::new();
    for r in (0..rows).rev() {
        data.extend_from_slice(t.tokens.row(r));
    }
    let shuffled = TokenGrid {
        tokens: Tensor::new(vec![rows, cols], data).unwrap(),
        ..t
    };
    assert_ne!(depatchify(&shuffled, 8).unwrap().data, g.data);
}

#[test]
fn depatchify_rejects_inconsistent_geometry() {
    let t = TokenGrid {
        tokens: Tensor::zeros(&[5, 64]),
        grid_h: 2,
        grid_w: 2,
        modality: Modality::Audio,
    };
    assert!(matches!(depatchify(&t, 8), Err(Error::Shape(_))));
}

#[test]
fn sinusoidal_single_cell() {
    let t = sinusoidal_2d(1, 1, 8).unwrap();
    assert_eq!(t.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
    assert!(matches!(sinusoidal_2d(2, 2, 6), Err(Error::Config(_))));
}

#[test]
fn neighbouring_columns_differ_only_in_column_half() {
    let t = sinusoidal_2d(3, 3, 16).unwrap();
    let (a, b) = (t.row(0), t.row(1));
    assert_eq!(&a[..8], &b[..8]);
    assert_ne!(&a[8..], &b[8..]);
}

#[test]
fn full_scale_table_rows_pairwise_distinct() {
    let t = sinusoidal_2d(14, 14, 768).unwrap();
    let n = t.rows();
    let mut min_dist = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = t.row(i).iter().zip(t.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
            min_dist = min_dist.min(d);
        }
    }
    assert!(min_dist > 1e-6, "closest pair distance {min_dist}");
}

#[test]
fn normalized_random_patch_statistics() {
    let mut rng = KeyedRng::new(5, &[]);
    let patch: Vec<f64> = (0..256).map(|_| 3.0 + 2.0 * rng.normal()).collect();
    let out = normalize_patch_target(&patch);
    let mean = out.iter().sum::<f64>() / 256.0;
    let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 256.0;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn noiseless_synthetic_classes_are_identical_within_and_distinct_across() {
    let g = Geometry::toy();
    let ds = synth_dataset(8, 4, 0.0, &g, 3).unwrap();
    assert_eq!(ds[0], ds[4]);
    assert_eq!(ds[1].video, ds[5].video);
    for c in 1..4 {
        assert_ne!(ds[0].video, ds[c].video);
        assert_ne!(ds[0].audio, ds[c].audio);
    }
    assert_eq!(ds[2].label, Some(2));
}

#[test]
fn synthetic_dataset_is_seed_reproducible() {
    let g = Geometry::toy();
    let a = synth_dataset(16, 4, 0.1, &g, 11).unwrap();
    let b = synth_dataset(16, 4, 0.1, &g, 11).unwrap();
    let c = synth_dataset(16, 4, 0.1, &g, 12).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // a sample depends only on (seed, index)
    let longer = synth_dataset(20, 4, 0.1, &g, 11).unwrap();
    assert_eq!(&longer[..16], a.as_slice());
}

#[test]
fn audio_band_rows_step_by_stride() {
    let g = Geometry::toy();
    let ds = synth_dataset(4, 4, 0.0, &g, 0).unwrap();
    let stride = g.audio_features / 4;
    let band_row = |s: &kdc_mae::patchio::AVSample| {
        (0..g.audio_features)
            .max_by(|&a, &b| s.audio.at(0, a, 0).total_cmp(&s.audio.at(0, b, 0)))
            .unwrap()
    };
    let rows: Vec<usize> = ds.iter().map(band_row).collect();
    for w in rows.windows(2) {
        assert_eq!(w[1] - w[0], stride);
    }
}

#[test]
fn too_many_classes_is_a_config_error() {
    let g = Geometry::toy();
    assert!(matches!(synth_dataset(4, 17, 0.0, &g, 0), Err(Error::Config(_))));
    assert!(matches!(synth_dataset(4, 1, 0.0, &g, 0), Err(Error::Config(_))));
}

#[test]
fn avt_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.avt");
    let ds = synth_dataset(10, 4, 0.3, &Geometry::toy(), 1).unwrap();
    write_avt(&path, &ds).unwrap();
    let back = read_avt(&path).unwrap();
    assert_eq!(back.len(), 10);
    for (a, b) in ds.iter().zip(&back) {
        assert_eq!(a.label, b.label);
        assert!(a.video.data.iter().zip(&b.video.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.audio.data.iter().zip(&b.audio.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    // unlabeled variant
    let unlabeled: Vec<_> = ds.iter().cloned().map(|mut s| {
        s.label = None;
        s
    }).collect();
    write_avt(&path, &unlabeled).unwrap();
    assert_eq!(read_avt(&path).unwrap(), unlabeled);
}

#[test]
fn avt_header_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.avt");
    let ds = synth_dataset(2, 2, 0.0, &Geometry::toy(), 1).unwrap();
    write_avt(&path, &ds).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"AVTENS01");
    let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + mlen]).unwrap();
    assert_eq!(manifest["version"], 1);
    assert_eq!(manifest["count"], 2);
    assert_eq!(manifest["dtype"], "f32le");
    assert_eq!(manifest["video_shape"], serde_json::json!([1, 32, 32]));
    assert_eq!(manifest["audio_shape"], serde_json::json!([16, 64]));
    let per = 4 * (32 * 32 + 16 * 64) + 4;
    assert_eq!(bytes.len(), 12 + mlen + 2 * per);
    // first video value, then the label of sample 0 right after its audio
    let v0 = f32::from_le_bytes(bytes[12 + mlen..16 + mlen].try_into().unwrap());
    assert_eq!(v0.to_bits(), ds[0].video.data[0].to_bits());
    let l0 = u32::from_le_bytes(bytes[12 + mlen + per - 4..12 + mlen + per].try_into().unwrap());
    assert_eq!(l0, 0);
}

#[test]
fn avt_parse_errors_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.avt");
    let ds = synth_dataset(3, 2, 0.0, &Geometry::toy(), 1).unwrap();
    write_avt(&path, &ds).unwrap();
    let good = fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(read_avt(&path), Err(Error::MagicMismatch { .. })));

    fs::write(&path, &good[..good.len() - 10]).unwrap();
    assert!(matches!(read_avt(&path), Err(Error::Truncated(_))));

    let mlen = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
    let text = String::from_utf8(good[12..12 + mlen].to_vec()).unwrap();
    let bumped = text.replace("\"version\":1", "\"version\":2");
    assert_eq!(bumped.len(), text.len());
    let mut v2 = good.clone();
    v2[12..12 + mlen].copy_from_slice(bumped.as_bytes());
    fs::write(&path, &v2).unwrap();
    assert!(matches!(
        read_avt(&path),
        Err(Error::VersionMismatch { expected: 1, found: 2 })
    ));

    let mut garbled = good.clone();
    garbled[12] = b'#';
    fs::write(&path, &garbled).unwrap();
    assert!(matches!(read_avt(&path), Err(Error::MalformedHeader(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn patchify_inverts_for_any_geometry(
        c in 1usize..4, gh in 1usize..5, gw in 1usize..5, p in 1usize..6, seed in 0u64..1000
    ) {
        let g = random_grid(c, gh * p, gw * p, seed);
        let t = patchify(&g, p, Modality::Video).unwrap();
        prop_assert_eq!(t.tokens.rows(), gh * gw);
        prop_assert_eq!(t.tokens.cols(), c * p * p);
        prop_assert_eq!(depatchify(&t, p).unwrap(), g);
    }
}
