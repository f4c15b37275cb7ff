//! Pretraining loop: keyed mask draws, the multi-stream objective, Adam,
//! learning-rate schedules, the MAKD baseline, checkpoints and JSONL metrics.

mod adam;
mod checkpoint;
mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CKPT_MAGIC, CKPT_VERSION,
};
pub use config::{
    lr_finetune, lr_pretrain, AdamConfig, LrSchedule, MakdConfig, Phase, TrainConfig,
};

use crate::error::{Error, Result};
use crate::losses::{build_objective, LossReport};
use crate::masking::{
    complementary_family, overlapping_family, structured_mask, uniform_mask, MaskPair, MaskSet,
};
use crate::model::{init_model, prepare_all, KdcModel, MaskPolicy, ModelConfig, PreparedSample};
use crate::numerics::{Graph, ParamTree, Precision};
use crate::patchio::{AVSample, Modality};
use crate::rng::{derive_seed, stream, KeyedRng};

/// Mutable training state; everything a checkpoint must restore.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamTree,
    pub adam: AdamState,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epochs_completed: u64,
    pub makd: Option<MakdState>,
}

/// The second, independent tree of a MAKD run.
#[derive(Clone, Debug, PartialEq)]
pub struct MakdState {
    pub params: ParamTree,
    pub adam: AdamState,
    /// Exponential moving averages of each tree's `L_total`, `[A, B]`.
    pub running_loss: [Option<f64>; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u32,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_c")]
    pub l_c: f64,
    #[serde(rename = "L_kd")]
    pub l_kd: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub w_c: f64,
    pub w_kd: f64,
    pub lr: f64,
    /// Seconds since the run (or resumed segment) started; `null` unless
    /// wall-time logging is enabled.
    pub wall_time: Option<f64>,
}

fn modality_key(m: Modality) -> u64 {
    match m {
        Modality::Audio => 0,
        Modality::Video => 1,
    }
}

/// The `n_streams` masks one sample gets for one modality under `policy`.
/// Structured policies apply to audio only; video then draws independent
/// uniform masks.
pub fn policy_masks(
    cfg: &ModelConfig,
    policy: MaskPolicy,
    ratio: f64,
    n_streams: usize,
    m: Modality,
    rng: &mut KeyedRng,
) -> Result<Vec<MaskSet>> {
    let n = cfg.geometry.tokens(m);
    let r = ratio;
    match policy {
        MaskPolicy::Complementary => Ok(complementary_family(n, r, n_streams, rng)?.members),
        MaskPolicy::Overlapping => Ok(overlapping_family(n, r, n_streams, rng)?.members),
        MaskPolicy::Structured(mode) if m == Modality::Audio => {
            let (gh, gw) = cfg.geometry.audio_grid();
            (0..n_streams)
                .map(|_| structured_mask(gh, gw, mode, r, rng))
                .collect()
        }
        MaskPolicy::Structured(_) => Ok(overlapping_family(n, r, n_streams, rng)?.members),
        MaskPolicy::Identical => Ok(vec![uniform_mask(n, r, rng)?; n_streams]),
    }
}

/// Mask pairs for one step, indexed `[stream][position in batch]`. Each
/// sample and modality draws from the stream keyed by
/// `(seed, epoch, step, sample index, modality)`, so a draw does not depend on
/// batch composition or on any other draw.
pub fn draw_masks(
    cfg: &ModelConfig,
    policy: MaskPolicy,
    n_streams: usize,
    seed: u64,
    epoch: u32,
    step: u64,
    samples: &[usize],
) -> Result<Vec<Vec<MaskPair>>> {
    let mut out = vec![Vec::with_capacity(samples.len()); n_streams];
    for &i in samples {
        let fam = |m: Modality| {
            let key = [stream::MASK, epoch as u64, step, i as u64, modality_key(m)];
            policy_masks(cfg, policy, cfg.mask_ratio, n_streams, m, &mut KeyedRng::new(seed, &key))
        };
        let audio = fam(Modality::Audio)?;
        let video = fam(Modality::Video)?;
        for (s, (a, v)) in audio.into_iter().zip(video).enumerate() {
            out[s].push(MaskPair { audio: a, video: v });
        }
    }
    Ok(out)
}

/// Sample visiting order for a 1-based epoch.
pub fn epoch_order(seed: u64, epoch: u32, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(KeyedRng::new(seed, &[stream::SHUFFLE, epoch as u64]).inner());
    order
}

/// Forward all streams, backpropagate the mixed loss and take one Adam step.
/// `masks[s][i]` is the mask pair of stream `s` for `batch[i]`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &KdcModel,
    params: &mut ParamTree,
    adam: &mut AdamState,
    data: &[PreparedSample],
    batch: &[usize],
    masks: &[Vec<MaskPair>],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let samples: Vec<PreparedSample> = batch.iter().map(|&i| data[i].clone()).collect();
    let mut g = Graph::new(cfg.precision);
    let obj = build_objective(&mut g, params, model, &samples, masks, &cfg.objective)?;
    let report = obj.report(&g)?;
    params.zero_grads();
    let grads = g.forward_backward(obj.total, params)?;
    adam_step(params, &grads, lr, &cfg.adam, adam, cfg.precision)?;
    // gradients are transient; leaving them zero keeps saved state canonical
    params.zero_grads();
    Ok(report)
}

/// Every `sync_interval` steps the tree with the lower running loss (ties go
/// to the first tree) becomes teacher and the other is blended toward it.
/// Returns the teacher's index when a sync happened. Weight-shared training
/// has a single tree and cannot use this.
pub fn makd_sync(
    trees: &mut [&mut ParamTree],
    running_loss: &[f64],
    sync_interval: u64,
    blend: f64,
    step: u64,
) -> Result<Option<usize>> {
    if trees.len() != 2 || running_loss.len() != 2 {
        return Err(Error::Config(format!(
            "MAKD needs exactly two independent parameter trees, got {} \
             (weight-shared streams read one tree)",
            trees.len()
        )));
    }
    if sync_interval == 0 || !(blend > 0.0 && blend <= 1.0) {
        return Err(Error::Config(format!(
            "invalid MAKD sync (interval {sync_interval}, blend {blend})"
        )));
    }
    if step == 0 || step % sync_interval != 0 {
        return Ok(None);
    }
    let teacher = if running_loss[1] < running_loss[0] { 1 } else { 0 };
    let (a, b) = trees.split_at_mut(1);
    let (t, s): (&ParamTree, &mut ParamTree) = if teacher == 0 {
        (&*a[0], &mut *b[0])
    } else {
        (&*b[0], &mut *a[0])
    };
    for (name, sp) in s.iter_mut() {
        let tp = t
            .get(name)
            .ok_or_else(|| Error::Contract(format!("teacher lacks parameter {name}")))?;
        if blend == 1.0 {
            sp.tensor = tp.tensor.clone();
        } else {
            for (x, &y) in sp.tensor.data_mut().iter_mut().zip(tp.tensor.data()) {
                *x = blend * y + (1.0 - blend) * *x;
            }
        }
    }
    Ok(Some(teacher))
}

fn round_tree(tree: &mut ParamTree, precision: Precision) {
    for (_, p) in tree.iter_mut() {
        precision.round_all(p.tensor.data_mut());
    }
}

fn mean(a: f64, b: f64) -> f64 {
    (a + b) / 2.0
}

pub struct Trainer {
    model: KdcModel,
    cfg: TrainConfig,
    data: Vec<PreparedSample>,
    state: TrainState,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, samples: &[AVSample]) -> Result<Self> {
        Self::check(&model_cfg, &cfg, samples)?;
        let fresh = |seed: u64| -> Result<ParamTree> {
            let mut p = init_model(&model_cfg, seed)?;
            cfg.objective.weights.install(&mut p)?;
            round_tree(&mut p, cfg.precision);
            Ok(p)
        };
        let params = fresh(cfg.seed)?;
        let makd = match cfg.makd {
            Some(_) => Some(MakdState {
                params: fresh(derive_seed(cfg.seed, &[stream::INIT, 1]))?,
                adam: AdamState::default(),
                running_loss: [None, None],
            }),
            None => None,
        };
        let state = TrainState {
            params,
            adam: AdamState::default(),
            step: 0,
            epochs_completed: 0,
            makd,
        };
        Ok(Self {
            data: prepare_all(samples, &model_cfg)?,
            model: KdcModel::new(model_cfg)?,
            cfg,
            state,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, samples: &[AVSample]) -> Result<Self> {
        Self::check(&ckpt.model, &ckpt.train, samples)?;
        if ckpt.dataset_len != samples.len() {
            return Err(Error::Config(format!(
                "checkpoint was trained on {} samples, dataset has {}",
                ckpt.dataset_len,
                samples.len()
            )));
        }
        if ckpt.state.makd.is_some() != ckpt.train.makd.is_some() {
            return Err(Error::Corrupt("MAKD state does not match the config".into()));
        }
        Ok(Self {
            data: prepare_all(samples, &ckpt.model)?,
            model: KdcModel::new(ckpt.model)?,
            cfg: ckpt.train,
            state: ckpt.state,
        })
    }

    fn check(model_cfg: &ModelConfig, cfg: &TrainConfig, samples: &[AVSample]) -> Result<()> {
        model_cfg.validate()?;
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if cfg.makd.is_some()
            && (model_cfg.n_streams != 2 || model_cfg.mask_policy != MaskPolicy::Overlapping)
        {
            return Err(Error::Config(
                "MAKD trains two independent trees: set n_streams 2 and mask_policy overlapping"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> &KdcModel {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn params(&self) -> &ParamTree {
        &self.state.params
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.data.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.steps_per_epoch() * self.cfg.epochs as u64
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config.clone(),
            train: self.cfg.clone(),
            dataset_len: self.data.len(),
            state: self.state.clone(),
        }
    }

    /// Runs the next optimizer step and returns its metrics row (without
    /// wall time).
    pub fn step(&mut self) -> Result<MetricsRow> {
        if self.is_done() {
            return Err(Error::Contract("training already finished".into()));
        }
        let spe = self.steps_per_epoch();
        let done = self.state.step;
        let epoch = (done / spe + 1) as u32;
        let pos = (done % spe) as usize;
        let bs = self.cfg.batch_size;
        let order = epoch_order(self.cfg.seed, epoch, self.data.len());
        let batch = &order[pos * bs..((pos + 1) * bs).min(order.len())];
        let lr = self.cfg.lr(epoch);
        let step_no = done + 1;
        let mc = &self.model.config;
        let masks = draw_masks(mc, mc.mask_policy, mc.n_streams, self.cfg.seed, epoch, step_no, batch)?;

        let report = match &mut self.state.makd {
            None => train_step(
                &self.model,
                &mut self.state.params,
                &mut self.state.adam,
                &self.data,
                batch,
                &masks,
                &self.cfg,
                lr,
            )?,
            Some(mk) => {
                let ra = train_step(
                    &self.model,
                    &mut self.state.params,
                    &mut self.state.adam,
                    &self.data,
                    batch,
                    &masks[..1],
                    &self.cfg,
                    lr,
                )?;
                let rb = train_step(
                    &self.model,
                    &mut mk.params,
                    &mut mk.adam,
                    &self.data,
                    batch,
                    &masks[1..],
                    &self.cfg,
                    lr,
                )?;
                let mcfg = self.cfg.makd.expect("validated");
                for (slot, total) in mk.running_loss.iter_mut().zip([ra.total, rb.total]) {
                    *slot = Some(match *slot {
                        Some(prev) => mcfg.loss_decay * prev + (1.0 - mcfg.loss_decay) * total,
                        None => total,
                    });
                }
                let running = mk.running_loss.map(|x| x.unwrap_or(f64::INFINITY));
                let synced = makd_sync(
                    &mut [&mut self.state.params, &mut mk.params],
                    &running,
                    mcfg.sync_interval,
                    mcfg.blend,
                    step_no,
                )?;
                if synced.is_some() {
                    round_tree(&mut self.state.params, self.cfg.precision);
                    round_tree(&mut mk.params, self.cfg.precision);
                }
                LossReport {
                    l_r: mean(ra.l_r, rb.l_r),
                    l_c: mean(ra.l_c, rb.l_c),
                    l_kd: 0.0,
                    w_c: ra.w_c,
                    w_kd: ra.w_kd,
                    total: mean(ra.total, rb.total),
                    streams: ra.streams.into_iter().chain(rb.streams).collect(),
                    recon_degenerate: ra.recon_degenerate || rb.recon_degenerate,
                }
            }
        };
        self.state.step = step_no;
        if step_no % spe == 0 {
            self.state.epochs_completed += 1;
        }
        Ok(MetricsRow {
            step: step_no,
            epoch,
            l_r: report.l_r,
            l_c: report.l_c,
            l_kd: report.l_kd,
            l_total: report.total,
            w_c: report.w_c,
            w_kd: report.w_kd,
            lr,
            wall_time: None,
        })
    }

    /// Steps until `until` (default: the end of training). With `out`, appends
    /// rows to `out/metrics.jsonl`, rewrites `out/last.ckpt` after every epoch
    /// and writes `out/final.ckpt` when training completes.
    pub fn run(&mut self, out: Option<&Path>, until: Option<u64>) -> Result<Vec<MetricsRow>> {
        let stop = until.unwrap_or(u64::MAX).min(self.total_steps());
        let mut sink = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                let file = fs::OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(self.state.step > 0)
                    .truncate(self.state.step == 0)
                    .open(dir.join("metrics.jsonl"))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let start = Instant::now();
        let spe = self.steps_per_epoch();
        let mut rows = Vec::new();
        while self.state.step < stop {
            let mut row = self.step()?;
            if self.cfg.log_wall_time {
                row.wall_time = Some(start.elapsed().as_secs_f64());
            }
            if let (Some(w), Some(dir)) = (sink.as_mut(), out) {
                serde_json::to_writer(&mut *w, &row)?;
                w.write_all(b"\n")?;
                if row.step % spe == 0 {
                    w.flush()?;
                    save_checkpoint(dir.join("last.ckpt"), &self.checkpoint())?;
                }
            }
            rows.push(row);
        }
        if let (Some(mut w), Some(dir)) = (sink, out) {
            w.flush()?;
            if self.is_done() {
                save_checkpoint(dir.join("final.ckpt"), &self.checkpoint())?;
            }
        }
        Ok(rows)
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub rows: Vec<MetricsRow>,
}

/// Full pretraining run from a fresh initialization.
pub fn pretrain(
    samples: &[AVSample],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out: Option<&Path>,
) -> Result<PretrainOutcome> {
    let mut t = Trainer::new(model_cfg, cfg, samples)?;
    let rows = t.run(out, None)?;
    Ok(PretrainOutcome {
        checkpoint: t.checkpoint(),
        rows,
    })
}
