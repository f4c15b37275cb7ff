use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{encode_corpus, EmbedCorpus, Encoder};
use crate::error::{Error, Result};
use crate::model::prepare_all;
use crate::numerics::{Graph, NodeId, ParamTree, Precision, Tensor};
use crate::patchio::AVSample;
use crate::rng::{stream, KeyedRng};
use crate::trainer::{adam_step, AdamConfig, AdamState, LrSchedule};

const HEAD_W: &str = "head.w";
const HEAD_B: &str = "head.b";

/// Which pooled embedding feeds the classifier head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FtMode {
    /// `[c_a, c_v]` concatenated.
    #[default]
    Av,
    A,
    V,
}

impl FtMode {
    fn width(self, dim: usize) -> usize {
        match self {
            FtMode::Av => 2 * dim,
            FtMode::A | FtMode::V => dim,
        }
    }

    fn features(self, c_a: &[f64], c_v: &[f64]) -> Vec<f64> {
        match self {
            FtMode::Av => c_a.iter().chain(c_v).copied().collect(),
            FtMode::A => c_a.to_vec(),
            FtMode::V => c_v.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FtMode,
    /// Train the head only (linear probe) instead of the whole encoder.
    pub frozen: bool,
    pub batch_size: usize,
    pub epochs: u32,
    /// Starting encoder rate, halved every epoch from the 2nd.
    pub base_lr: f64,
    /// The head learns at `head_lr_scale * base_lr`.
    pub head_lr_scale: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FtMode::Av,
            frozen: false,
            batch_size: 8,
            epochs: 10,
            base_lr: 1e-4,
            head_lr_scale: 100.0,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0
            || self.epochs == 0
            || !(self.base_lr > 0.0)
            || !(self.head_lr_scale > 0.0)
        {
            return Err(Error::Config(
                "finetune needs batch_size >= 1, epochs >= 1, base_lr > 0 and head_lr_scale > 0"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub mode: FtMode,
    pub frozen: bool,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Top-1 accuracy on the held-out set.
    pub accuracy: f64,
    pub train_accuracy: f64,
    /// Largest class frequency in the held-out set.
    pub majority_prior: f64,
    /// Mean cross-entropy over the last epoch.
    pub final_loss: f64,
}

impl FinetuneReport {
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("accuracy".into(), self.accuracy),
            ("train_accuracy".into(), self.train_accuracy),
            ("majority_prior".into(), self.majority_prior),
            ("final_loss".into(), self.final_loss),
            ("n_classes".into(), self.n_classes as f64),
        ])
    }
}

/// Seeded split into `(train, test)` with `n_test` held out.
pub fn split_holdout(samples: &[AVSample], n_test: usize, seed: u64) -> Result<(Vec<AVSample>, Vec<AVSample>)> {
    if n_test == 0 || n_test >= samples.len() {
        return Err(Error::Config(format!(
            "cannot hold out {n_test} of {} samples",
            samples.len()
        )));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(KeyedRng::new(seed, &[stream::SPLIT]).inner());
    let (train, test) = order.split_at(samples.len() - n_test);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

fn labels_of(samples: &[AVSample], what: &str) -> Result<Vec<usize>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.label
                .map(|l| l as usize)
                .ok_or_else(|| Error::Config(format!("{what} sample {i} has no label")))
        })
        .collect()
}

/// Per-dimension mean and inverse std of the training features, frozen at
/// the start: a fixed, non-affine normalization in front of the head.
#[derive(Clone, Debug)]
struct FeatureNorm {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl FeatureNorm {
    const EPS: f64 = 1e-6;

    fn fit(feats: &[Vec<f64>]) -> Self {
        let n = feats.len() as f64;
        let w = feats[0].len();
        let mean: Vec<f64> = (0..w).map(|d| feats.iter().map(|f| f[d]).sum::<f64>() / n).collect();
        let inv_std = (0..w)
            .map(|d| {
                let var = feats.iter().map(|f| (f[d] - mean[d]).powi(2)).sum::<f64>() / n;
                1.0 / (var + Self::EPS).sqrt()
            })
            .collect();
        Self { mean, inv_std }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.inv_std)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn node(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let neg: Vec<f64> = self.mean.iter().map(|m| -m).collect();
        let shift = g.constant(Tensor::vector(neg));
        let scale = g.constant(Tensor::vector(self.inv_std.clone()));
        let c = g.add_row(x, shift)?;
        g.mul_row(c, scale)
    }
}

fn head_logits(head: &ParamTree, x: &[f64], n_classes: usize) -> Vec<f64> {
    let w = head.get(HEAD_W).expect("head").tensor.data();
    let b = head.get(HEAD_B).expect("head").tensor.data();
    (0..n_classes)
        .map(|c| b[c] + x.iter().enumerate().map(|(i, xi)| xi * w[i * n_classes + c]).sum::<f64>())
        .collect()
}

/// Argmax with ties to the lower class index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(feats: &[Vec<f64>], labels: &[usize], head: &ParamTree, n_classes: usize) -> f64 {
    let hits = feats
        .iter()
        .zip(labels)
        .filter(|(x, &y)| argmax(&head_logits(head, x, n_classes)) == y)
        .count();
    hits as f64 / labels.len() as f64
}

fn features(corpus: &EmbedCorpus, mode: FtMode) -> Vec<Vec<f64>> {
    corpus.c_a.iter().zip(&corpus.c_v).map(|(a, v)| mode.features(a, v)).collect()
}

/// Mean cross-entropy of a linear head over `x` (`[batch, width]`).
fn ce_node(g: &mut Graph, tree: &ParamTree, x: NodeId, labels: &[usize], n_classes: usize) -> Result<NodeId> {
    let w = g.param(tree, HEAD_W)?;
    let b = g.param(tree, HEAD_B)?;
    let z = g.matmul(x, w)?;
    let logits = g.add_row(z, b)?;
    let logp = g.log_softmax(logits)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(r, &y)| r * n_classes + y).collect();
    let picked = g.pick_flat(logp, &idx)?;
    let m = g.mean_all(picked);
    Ok(g.scale(m, -1.0))
}

/// Attaches a zero-initialized linear head to the pooled embedding chosen by
/// `cfg.mode`, trains it with cross-entropy under the halving finetune
/// schedule and reports top-1 accuracy on `test`. With `cfg.frozen` only the
/// head learns; otherwise every encoder weight does too.
pub fn finetune_classify(
    train: &[AVSample],
    test: &[AVSample],
    enc: &Encoder,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("finetune needs non-empty train and test sets".into()));
    }
    let y_train = labels_of(train, "train")?;
    let y_test = labels_of(test, "test")?;
    let n_classes = y_train.iter().chain(&y_test).max().map_or(0, |m| m + 1);
    if n_classes < 2 {
        return Err(Error::Config("classification needs at least 2 classes".into()));
    }
    let width = cfg.mode.width(enc.config().dim);

    let mut tree = if cfg.frozen { ParamTree::new() } else { enc.params.clone() };
    tree.insert(HEAD_W, Tensor::zeros(&[width, n_classes]))?;
    tree.insert(HEAD_B, Tensor::zeros(&[n_classes]))?;
    let mut adam_head = AdamState::default();
    let mut adam_enc = AdamState::default();

    let init_feats = features(&encode_corpus(train, enc, None, 0)?, cfg.mode);
    let norm = FeatureNorm::fit(&init_feats);
    let frozen_feats: Option<Vec<Vec<f64>>> =
        cfg.frozen.then(|| init_feats.iter().map(|f| norm.apply(f)).collect());
    let prepared = if cfg.frozen { Vec::new() } else { prepare_all(train, enc.config())? };

    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        let lr = LrSchedule::FINETUNE.lr(cfg.base_lr, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(KeyedRng::new(cfg.seed, &[stream::FINETUNE, epoch as u64]).inner());
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| y_train[i]).collect();
            let mut g = Graph::new(Precision::F64);
            let x = match &frozen_feats {
                Some(f) => {
                    let data = batch.iter().flat_map(|&i| f[i].iter().copied()).collect();
                    g.constant(Tensor::matrix(batch.len(), width, data)?)
                }
                None => {
                    let rows = batch
                        .iter()
                        .map(|&i| {
                            let j = enc.model.encode_unmasked(&mut g, &tree, &prepared[i])?;
                            match cfg.mode {
                                FtMode::Av => g.concat_cols(&[j.c_a, j.c_v]),
                                FtMode::A => Ok(j.c_a),
                                FtMode::V => Ok(j.c_v),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let x = g.concat_rows(&rows)?;
                    norm.node(&mut g, x)?
                }
            };
            let loss = ce_node(&mut g, &tree, x, &labels, n_classes)?;
            loss_sum += g.scalar_value(loss)? * batch.len() as f64;
            tree.zero_grads();
            let grads = g.forward_backward(loss, &mut tree)?;
            let (head, body): (BTreeMap<_, _>, BTreeMap<_, _>) =
                grads.into_iter().partition(|(k, _)| k == HEAD_W || k == HEAD_B);
            let head_lr = lr * cfg.head_lr_scale;
            adam_step(&mut tree, &head, head_lr, &cfg.adam, &mut adam_head, Precision::F64)?;
            if !body.is_empty() {
                adam_step(&mut tree, &body, lr, &cfg.adam, &mut adam_enc, Precision::F64)?;
            }
        }
        tree.zero_grads();
        final_loss = loss_sum / train.len() as f64;
    }

    let tuned;
    let final_enc = if cfg.frozen {
        enc
    } else {
        tuned = Encoder::new(enc.config().clone(), tree.clone())?;
        &tuned
    };
    let normalized = |set: &[AVSample]| -> Result<Vec<Vec<f64>>> {
        let f = features(&encode_corpus(set, final_enc, None, 0)?, cfg.mode);
        Ok(f.iter().map(|x| norm.apply(x)).collect())
    };
    let train_feats = match frozen_feats {
        Some(f) => f,
        None => normalized(train)?,
    };
    let test_feats = normalized(test)?;
    let mut counts = vec![0usize; n_classes];
    for &y in &y_test {
        counts[y] += 1;
    }
    Ok(FinetuneReport {
        mode: cfg.mode,
        frozen: cfg.frozen,
        n_classes,
        n_train: train.len(),
        n_test: test.len(),
        accuracy: accuracy(&test_feats, &y_test, &tree, n_classes),
        train_accuracy: accuracy(&train_feats, &y_train, &tree, n_classes),
        majority_prior: *counts.iter().max().unwrap() as f64 / test.len() as f64,
        final_loss,
    })
}
