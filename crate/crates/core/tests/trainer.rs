use std::collections::BTreeMap;

use kdc_mae::losses::{build_objective, multi_stream_kd, project_to_prob, ObjectiveSpec};
use kdc_mae::masking::MaskPair;
use kdc_mae::model::{prepare_all, KdcModel, MaskPolicy, ModelConfig};
use kdc_mae::numerics::{Graph, ParamTree, Precision, Tensor};
use kdc_mae::patchio::{synth_dataset, AVSample};
use kdc_mae::trainer::{
    adam_step, decode_checkpoint, draw_masks, encode_checkpoint, load_checkpoint, lr_finetune,
    lr_pretrain, makd_sync, pretrain, save_checkpoint, AdamConfig, AdamState, LrSchedule,
    MakdConfig, MetricsRow, TrainConfig, Trainer, CKPT_VERSION,
};
use kdc_mae::Error;
use proptest::prelude::*;

// Schedule oracles written directly from the schedule text, by enumeration
// rather than closed form.
fn pretrain_table(base: f64) -> Vec<f64> {
    let mut lr = base;
    let mut out = Vec::new();
    for epoch in 1..=100u32 {
        // halve on entering epoch 16, then on every 5th epoch after it
        if epoch >= 16 && (epoch - 16) % 5 == 0 {
            lr /= 2.0;
        }
        out.push(lr);
    }
    out
}

fn finetune_table(base: f64) -> Vec<f64> {
    let mut lr = base;
    let mut out = vec![lr];
    for _ in 2..=100 {
        lr /= 2.0;
        out.push(lr);
    }
    out
}

#[test]
fn lr_examples() {
    assert_eq!(lr_pretrain(5e-5, 1), 5e-5);
    assert_eq!(lr_pretrain(5e-5, 15), 5e-5);
    assert_eq!(lr_pretrain(5e-5, 16), 2.5e-5);
    assert_eq!(lr_pretrain(5e-5, 23), 1.25e-5);
    assert_eq!(lr_finetune(1e-4, 1), 1e-4);
    assert_eq!(lr_finetune(1e-4, 2), 5e-5);
    assert_eq!(lr_finetune(1e-4, 5), 6.25e-6);
}

#[test]
fn lr_matches_independent_tables_to_epoch_100() {
    let pre = pretrain_table(5e-5);
    let fine = finetune_table(1e-4);
    for e in 1..=100u32 {
        assert_eq!(lr_pretrain(5e-5, e), pre[e as usize - 1], "pretrain epoch {e}");
        assert_eq!(lr_finetune(1e-4, e), fine[e as usize - 1], "finetune epoch {e}");
    }
    let cfg = TrainConfig::finetune();
    assert_eq!(cfg.schedule, LrSchedule::FINETUNE);
    assert_eq!(cfg.lr(3), 2.5e-5);
}

fn scalar_tree(w: f64) -> ParamTree {
    let mut t = ParamTree::new();
    t.insert("w", Tensor::vector(vec![w])).unwrap();
    t
}

fn grads(g: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::vector(vec![g]))])
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let mut p = scalar_tree(0.0);
    let mut st = AdamState::default();
    adam_step(&mut p, &grads(1.0), 0.1, &AdamConfig::default(), &mut st, Precision::F64).unwrap();
    // m_hat = 1, v_hat = 1 -> w = -0.1 / (1 + 1e-8)
    let w = p.get("w").unwrap().tensor.data()[0];
    assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    assert_eq!(st.t, 1);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut p = scalar_tree(0.7);
    let mut st = AdamState::default();
    for _ in 0..3 {
        adam_step(&mut p, &grads(0.0), 0.1, &AdamConfig::default(), &mut st, Precision::F64)
            .unwrap();
    }
    assert_eq!(p.get("w").unwrap().tensor.data()[0], 0.7);
}

#[test]
fn adam_rejects_non_finite_gradients_by_name() {
    let mut p = scalar_tree(0.7);
    let mut st = AdamState::default();
    let err = adam_step(&mut p, &grads(f64::NAN), 0.1, &AdamConfig::default(), &mut st, Precision::F64)
        .unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("w[0]")), "{err}");
    assert_eq!(st.t, 0);
    assert_eq!(p.get("w").unwrap().tensor.data()[0], 0.7);
}

#[test]
fn makd_sync_examples() {
    // alpha 0.5: teacher 2, student 0 -> 1
    let mut a = scalar_tree(2.0);
    let mut b = scalar_tree(0.0);
    let t = makd_sync(&mut [&mut a, &mut b], &[0.1, 0.2], 10, 0.5, 10).unwrap();
    assert_eq!(t, Some(0));
    assert_eq!(b.get("w").unwrap().tensor.data()[0], 1.0);
    assert_eq!(a.get("w").unwrap().tensor.data()[0], 2.0);

    // alpha 1 copies exactly; lower loss on B makes B the teacher
    let mut a = scalar_tree(0.3);
    let mut b = scalar_tree(-1.7);
    assert_eq!(makd_sync(&mut [&mut a, &mut b], &[0.5, 0.4], 10, 1.0, 20).unwrap(), Some(1));
    assert!(a.same_values(&b));

    // ties go to A
    let mut a = scalar_tree(1.0);
    let mut b = scalar_tree(5.0);
    assert_eq!(makd_sync(&mut [&mut a, &mut b], &[0.3, 0.3], 10, 1.0, 30).unwrap(), Some(0));
    assert_eq!(b.get("w").unwrap().tensor.data()[0], 1.0);

    // off-interval steps do nothing
    let mut a = scalar_tree(1.0);
    let mut b = scalar_tree(5.0);
    assert_eq!(makd_sync(&mut [&mut a, &mut b], &[0.3, 0.1], 10, 1.0, 7).unwrap(), None);
    assert_eq!(a.get("w").unwrap().tensor.data()[0], 1.0);

    // a single shared tree is a config error
    let mut a = scalar_tree(1.0);
    let err = makd_sync(&mut [&mut a], &[0.3], 10, 1.0, 10).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

fn data(n: usize, seed: u64) -> Vec<AVSample> {
    synth_dataset(n, 4, 0.3, &ModelConfig::toy().geometry, seed).unwrap()
}

fn small_train(epochs: u32, batch: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: batch, base_lr: 1e-3, seed: 5, ..TrainConfig::default() }
}

#[test]
fn two_epochs_of_eight_in_fours_is_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = pretrain(&data(8, 0), ModelConfig::toy(), small_train(2, 4), Some(dir.path())).unwrap();
    assert_eq!(out.rows.len(), 4);
    let steps: Vec<u64> = out.rows.iter().map(|r| r.step).collect();
    let epochs: Vec<u32> = out.rows.iter().map(|r| r.epoch).collect();
    assert_eq!(steps, [1, 2, 3, 4]);
    assert_eq!(epochs, [1, 1, 2, 2]);
    assert!(out.rows.iter().all(|r| r.wall_time.is_none()));

    let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let parsed: Vec<MetricsRow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, out.rows);
    let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(
        text.lines().next().unwrap(),
    )
    .unwrap()
    .keys()
    .cloned()
    .collect();
    for k in ["step", "epoch", "L_r", "L_c", "L_kd", "L_total", "w_c", "w_kd", "lr", "wall_time"] {
        assert!(keys.contains(&k.to_string()), "missing {k}");
    }

    let fin = load_checkpoint(dir.path().join("final.ckpt")).unwrap();
    assert_eq!(fin, out.checkpoint);
    assert_eq!(fin.state.step, 4);
    assert_eq!(fin.state.epochs_completed, 2);
    assert!(dir.path().join("last.ckpt").exists());
}

#[test]
fn equal_seeds_write_identical_metrics_files() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        pretrain(&data(8, 1), ModelConfig::toy(), small_train(1, 4), Some(dir.path())).unwrap();
        std::fs::read(dir.path().join("metrics.jsonl")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let samples = data(8, 2);
    let mut t = Trainer::new(ModelConfig::toy(), small_train(2, 4), &samples).unwrap();
    t.run(None, Some(3)).unwrap();
    let ck = t.checkpoint();
    let back = decode_checkpoint(&encode_checkpoint(&ck).unwrap()).unwrap();
    assert_eq!(back, ck);
    assert!(back.state.params.same_values(&ck.state.params));
    assert_eq!(back.state.params.digest(), ck.state.params.digest());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ck);
}

#[test]
fn checkpoint_errors_are_distinct() {
    let samples = data(4, 3);
    let t = Trainer::new(ModelConfig::toy(), small_train(1, 4), &samples).unwrap();
    let bytes = encode_checkpoint(&t.checkpoint()).unwrap();

    for cut in [bytes.len() - 1, bytes.len() / 2, 12] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)), "cut {cut}: {err}");
    }

    let mut flipped = bytes.clone();
    *flipped.last_mut().unwrap() ^= 1;
    assert!(matches!(decode_checkpoint(&flipped).unwrap_err(), Error::Corrupt(_)));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad_magic).unwrap_err(), Error::MagicMismatch { .. }));

    // rewrite the format version inside the manifest
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = std::str::from_utf8(&bytes[16..16 + mlen]).unwrap();
    let needle = format!("\"format_version\":{CKPT_VERSION}");
    assert!(json.contains(&needle));
    let json = json.replace(&needle, "\"format_version\":9");
    let mut v2 = bytes[..8].to_vec();
    v2.extend_from_slice(&(json.len() as u64).to_le_bytes());
    v2.extend_from_slice(json.as_bytes());
    v2.extend_from_slice(&bytes[16 + mlen..]);
    let err = decode_checkpoint(&v2).unwrap_err();
    assert!(matches!(err, Error::VersionMismatch { expected: 1, found: 9 }), "{err}");
}

#[test]
fn resumed_run_reproduces_the_unbroken_trace() {
    let samples = data(8, 4);
    let cfg = small_train(3, 3);
    let mut whole = Trainer::new(ModelConfig::toy(), cfg.clone(), &samples).unwrap();
    let rows = whole.run(None, None).unwrap();
    assert_eq!(rows.len(), 9);

    // stop mid-epoch, serialize, resume
    let mut first = Trainer::new(ModelConfig::toy(), cfg, &samples).unwrap();
    first.run(None, Some(4)).unwrap();
    let bytes = encode_checkpoint(&first.checkpoint()).unwrap();
    let mut resumed = Trainer::from_checkpoint(decode_checkpoint(&bytes).unwrap(), &samples).unwrap();
    let tail = resumed.run(None, None).unwrap();
    assert_eq!(tail[0].step, 5);
    for (a, b) in tail.iter().zip(&rows[4..]) {
        assert_eq!(a.l_total.to_bits(), b.l_total.to_bits(), "step {}", a.step);
        assert_eq!(a, b);
    }
    assert!(resumed.params().same_values(whole.params()));
    assert_eq!(resumed.state().adam, whole.state().adam);
}

#[test]
fn resume_rejects_a_different_dataset() {
    let samples = data(8, 4);
    let t = Trainer::new(ModelConfig::toy(), small_train(1, 4), &samples).unwrap();
    let err = Trainer::from_checkpoint(t.checkpoint(), &samples[..6]).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn single_stream_reports_zero_distillation() {
    let cfg = ModelConfig { n_streams: 1, ..ModelConfig::toy() };
    let mut t = Trainer::new(cfg, small_train(1, 4), &data(4, 5)).unwrap();
    let row = t.step().unwrap();
    assert_eq!(row.l_kd, 0.0);
    assert!((row.l_total - (row.l_r + row.w_c * row.l_c)).abs() < 1e-6 * row.l_total);
}

#[test]
fn identical_masks_give_zero_distillation_at_the_first_step() {
    let cfg = ModelConfig { mask_policy: MaskPolicy::Identical, ..ModelConfig::toy() };
    let mut t = Trainer::new(cfg, small_train(1, 4), &data(4, 6)).unwrap();
    assert_eq!(t.step().unwrap().l_kd, 0.0);
}

#[test]
fn weight_shared_training_keeps_one_tree() {
    let mut t = Trainer::new(ModelConfig::toy(), small_train(1, 4), &data(4, 6)).unwrap();
    t.step().unwrap();
    assert!(t.state().makd.is_none());
    // every parameter is f32-representable after f32 training
    for (_, p) in t.params().iter() {
        assert!(p.tensor.data().iter().all(|&x| (x as f32) as f64 == x));
    }
}

#[test]
fn triple_streams_use_the_pairwise_mean() {
    let cfg = ModelConfig { n_streams: 3, ..ModelConfig::toy() };
    let model = KdcModel::new(cfg.clone()).unwrap();
    let samples = data(1, 7);
    let prepared = prepare_all(&samples, &cfg).unwrap();
    let p = kdc_mae::model::init_model(&cfg, 7).unwrap();
    let masks = draw_masks(&cfg, cfg.mask_policy, 3, 7, 1, 1, &[0]).unwrap();
    let mut g = Graph::new(Precision::F64);
    let obj = build_objective(&mut g, &p, &model, &prepared, &masks, &ObjectiveSpec::default()).unwrap();
    let r = obj.report(&g).unwrap();
    let probs: Vec<_> = obj
        .streams
        .iter()
        .flatten()
        .map(|s| project_to_prob(&s.materialize(&g).chi).unwrap())
        .collect();
    assert_eq!(probs.len(), 3);
    let oracle = multi_stream_kd(&probs).unwrap();
    assert!((r.l_kd - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{} vs {oracle}", r.l_kd);
}

#[test]
fn distillation_falls_over_training_on_a_fixed_batch() {
    let samples = data(8, 8);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        base_lr: 1e-3,
        schedule: LrSchedule { hold_epochs: 1000, halve_every: 1 },
        seed: 8,
        ..TrainConfig::default()
    };
    let rows = pretrain(&samples, ModelConfig::toy(), cfg, None).unwrap().rows;
    assert_eq!(rows.len(), 200);
    let (first, last) = (rows[0].l_kd, rows[199].l_kd);
    assert!(last < first, "L_kd {first} -> {last}");
}

#[test]
fn makd_trains_two_trees_and_syncs() {
    let mc = ModelConfig { mask_policy: MaskPolicy::Overlapping, ..ModelConfig::toy() };
    let cfg = TrainConfig {
        makd: Some(MakdConfig { sync_interval: 2, blend: 1.0, loss_decay: 0.9 }),
        ..small_train(1, 4)
    };
    let samples = data(8, 9);
    let mut t = Trainer::new(mc.clone(), cfg.clone(), &samples).unwrap();
    let mk = t.state().makd.as_ref().unwrap();
    assert!(!mk.params.same_values(t.params()));
    let r1 = t.step().unwrap();
    assert_eq!(r1.l_kd, 0.0);
    assert!(!t.state().makd.as_ref().unwrap().params.same_values(t.params()));
    t.step().unwrap();
    // step 2 syncs with blend 1: trees coincide
    assert!(t.state().makd.as_ref().unwrap().params.same_values(t.params()));

    let ck = decode_checkpoint(&encode_checkpoint(&t.checkpoint()).unwrap()).unwrap();
    assert_eq!(ck, t.checkpoint());

    // MAKD demands independent masks
    let err = Trainer::new(ModelConfig::toy(), cfg, &samples).err().unwrap();
    assert!(matches!(err, Error::Config(_)));
}

fn pairs_equal(a: &[Vec<MaskPair>], b: &[Vec<MaskPair>]) -> bool {
    a == b
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mask_draws_do_not_depend_on_batch_composition(
        seed in any::<u64>(), step in 1u64..1000, i in 0usize..64, j in 0usize..64,
    ) {
        let cfg = ModelConfig::toy();
        let alone = draw_masks(&cfg, cfg.mask_policy, 2, seed, 1, step, &[i]).unwrap();
        let with = draw_masks(&cfg, cfg.mask_policy, 2, seed, 1, step, &[j, i]).unwrap();
        let picked: Vec<Vec<MaskPair>> = with.iter().map(|s| vec![s[1].clone()]).collect();
        prop_assert!(pairs_equal(&alone, &picked));
        for s in &alone {
            prop_assert_eq!(s[0].audio.masked().len(), 12);
            prop_assert_eq!(s[0].video.masked().len(), 12);
        }
        // complementary streams never unmask the same token
        let (a0, a1) = (&alone[0][0].audio, &alone[1][0].audio);
        for t in a0.unmasked() {
            prop_assert!(!a1.unmasked().contains(&t));
        }
    }

    #[test]
    fn lr_is_non_increasing(base in 1e-6f64..1.0, e in 1u32..200) {
        prop_assert!(lr_pretrain(base, e + 1) <= lr_pretrain(base, e));
        prop_assert!(lr_finetune(base, e + 1) <= lr_finetune(base, e));
    }
}
