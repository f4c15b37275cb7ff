//! Downstream evaluations: embedding corpora, audio<->video retrieval,
//! inpainting loss, sound-source localization and classification finetuning.

mod finetune;

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use finetune::{finetune_classify, split_holdout, FinetuneConfig, FinetuneReport, FtMode};

use crate::error::{Error, Result};
use crate::losses::{reconstruction_loss, ReconDivisor};
use crate::masking::{MaskPair, MaskSet};
use crate::model::{init_model, prepare_all, GradScope, KdcModel, MaskPolicy, ModelConfig};
use crate::numerics::{Graph, ParamTree, Precision, Tensor};
use crate::patchio::{AVSample, Modality};
use crate::rng::{stream, KeyedRng};
use crate::trainer::{policy_masks, Checkpoint};

/// A model and the weights to evaluate it with.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub model: KdcModel,
    pub params: ParamTree,
}

impl Encoder {
    pub fn new(config: ModelConfig, params: ParamTree) -> Result<Self> {
        Ok(Self {
            model: KdcModel::new(config)?,
            params,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.model.clone(), ckpt.state.params.clone())
    }

    /// Freshly initialized weights, the untrained baseline.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model(&config, seed)?;
        Self::new(config, params)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }
}

/// Per-sample pooled embeddings with aligned indices across modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedCorpus {
    pub c_a: Vec<Vec<f64>>,
    pub c_v: Vec<Vec<f64>>,
    /// Per-token video embeddings from the video-only joint pass.
    pub video_tokens: Option<Vec<Tensor>>,
    pub labels: Vec<Option<u32>>,
}

impl EmbedCorpus {
    pub fn new(c_a: Vec<Vec<f64>>, c_v: Vec<Vec<f64>>, labels: Vec<Option<u32>>) -> Result<Self> {
        let c = Self {
            c_a,
            c_v,
            video_tokens: None,
            labels,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_video_tokens(mut self, tokens: Vec<Tensor>) -> Result<Self> {
        self.video_tokens = Some(tokens);
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.c_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_a.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.c_a.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.c_a.len();
        if self.c_v.len() != n || self.labels.len() != n {
            return Err(Error::dim(
                "EmbedCorpus",
                format!("{n} audio, {} video, {} labels", self.c_v.len(), self.labels.len()),
            ));
        }
        let d = self.dim();
        if let Some(i) = (0..n).find(|&i| self.c_a[i].len() != d || self.c_v[i].len() != d) {
            return Err(Error::dim("EmbedCorpus", format!("sample {i} is not {d}-dimensional")));
        }
        if let Some(t) = &self.video_tokens {
            if t.len() != n || t.iter().any(|t| t.cols() != d) {
                return Err(Error::dim("EmbedCorpus", "video tokens misaligned"));
            }
        }
        Ok(())
    }
}

fn modality_key(m: Modality) -> u64 {
    match m {
        Modality::Audio => 0,
        Modality::Video => 1,
    }
}

/// One stream's masks for sample `i` in evaluation, keyed by
/// `(seed, EVAL_MASK, i, modality)`.
fn eval_masks(
    cfg: &ModelConfig,
    policy: MaskPolicy,
    ratio: f64,
    seed: u64,
    i: usize,
) -> Result<MaskPair> {
    let draw = |m: Modality| -> Result<MaskSet> {
        let mut rng = KeyedRng::new(seed, &[stream::EVAL_MASK, i as u64, modality_key(m)]);
        let mut fam = policy_masks(cfg, policy, ratio, 1, m, &mut rng)?;
        Ok(fam.remove(0))
    };
    Ok(MaskPair {
        audio: draw(Modality::Audio)?,
        video: draw(Modality::Video)?,
    })
}

/// Encodes every sample. `mask_ratio: None` passes all tokens (the
/// evaluation default); `Some(r)` hides a seeded uniform fraction `r`.
pub fn encode_corpus(
    samples: &[AVSample],
    enc: &Encoder,
    mask_ratio: Option<f64>,
    seed: u64,
) -> Result<EmbedCorpus> {
    let cfg = enc.config();
    let data = prepare_all(samples, cfg)?;
    let rows: Vec<(Vec<f64>, Vec<f64>, Tensor)> = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = Graph::new(Precision::F64);
            let (c_a, c_v, tok) = match mask_ratio {
                None => {
                    let j = enc.model.encode_unmasked(&mut g, &enc.params, s)?;
                    (j.c_a, j.c_v, j.v_tokens)
                }
                Some(r) => {
                    let m = eval_masks(cfg, MaskPolicy::Overlapping, r, seed, i)?;
                    let st = enc
                        .model
                        .forward_stream(&mut g, &enc.params, s, &m.audio, &m.video, GradScope::Full)?;
                    (st.c_a, st.c_v, st.v_joint_tokens)
                }
            };
            Ok((
                g.value(c_a).data().to_vec(),
                g.value(c_v).data().to_vec(),
                g.value(tok).clone(),
            ))
        })
        .collect::<Result<_>>()?;
    let mut c_a = Vec::with_capacity(rows.len());
    let mut c_v = Vec::with_capacity(rows.len());
    let mut tokens = Vec::with_capacity(rows.len());
    for (a, v, t) in rows {
        c_a.push(a);
        c_v.push(v);
        tokens.push(t);
    }
    EmbedCorpus::new(c_a, c_v, samples.iter().map(|s| s.label).collect())?.with_video_tokens(tokens)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let n = (dot(a, a) * dot(b, b)).sqrt();
    if n == 0.0 {
        0.0
    } else {
        dot(a, b) / n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub ks: Vec<usize>,
    pub audio_to_video: Vec<f64>,
    pub video_to_audio: Vec<f64>,
}

impl Retrieval {
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for (i, k) in self.ks.iter().enumerate() {
            m.insert(format!("a2v_r@{k}"), self.audio_to_video[i]);
            m.insert(format!("v2a_r@{k}"), self.video_to_audio[i]);
        }
        m
    }
}

/// 0-based rank of each query's true partner among all candidates by cosine
/// similarity. Candidates scoring equal to the partner rank ahead of it only
/// if their index is lower.
fn partner_ranks(queries: &[Vec<f64>], candidates: &[Vec<f64>]) -> Vec<usize> {
    queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let s: Vec<f64> = candidates.iter().map(|c| cosine(q, c)).collect();
            (0..s.len())
                .filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i))
                .count()
        })
        .collect()
}

/// Recall@k in both directions: the fraction of queries whose partner ranks
/// in the top `k` of the opposite modality.
pub fn retrieval_at_k(corpus: &EmbedCorpus, ks: &[usize]) -> Result<Retrieval> {
    corpus.validate()?;
    let n = corpus.len();
    let kmax = ks.iter().copied().max().unwrap_or(0);
    if ks.is_empty() || ks.contains(&0) || n < kmax {
        return Err(Error::Contract(format!(
            "retrieval needs ks >= 1 and at least max(ks) = {kmax} samples, got {n}"
        )));
    }
    let recall = |ranks: &[usize]| -> Vec<f64> {
        ks.iter()
            .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
            .collect()
    };
    Ok(Retrieval {
        ks: ks.to_vec(),
        audio_to_video: recall(&partner_ranks(&corpus.c_a, &corpus.c_v)),
        video_to_audio: recall(&partner_ranks(&corpus.c_v, &corpus.c_a)),
    })
}

/// Mean over samples of the best cosine between `c_a` and any video token.
/// This max-over-tokens definition is a declared stand-in for an average
/// cosine-similarity localization score.
pub fn localization_score(corpus: &EmbedCorpus) -> Result<f64> {
    corpus.validate()?;
    let tokens = corpus
        .video_tokens
        .as_ref()
        .ok_or_else(|| Error::Contract("localization needs per-token video embeddings".into()))?;
    if corpus.is_empty() {
        return Err(Error::Contract("empty corpus".into()));
    }
    let total: f64 = corpus
        .c_a
        .iter()
        .zip(tokens)
        .map(|(a, t)| {
            (0..t.rows())
                .map(|r| cosine(a, t.row(r)))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    Ok(total / corpus.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpaintConfig {
    pub mask_ratio: f64,
    pub policy: MaskPolicy,
    pub seed: u64,
    pub divisor: ReconDivisor,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.75,
            policy: MaskPolicy::Overlapping,
            seed: 0,
            divisor: ReconDivisor::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InpaintReport {
    pub loss_a: f64,
    pub loss_v: f64,
}

/// Mean per-modality reconstruction loss over the dataset under seeded
/// masks. Read-only: parameters are never touched.
pub fn inpaint_eval(samples: &[AVSample], enc: &Encoder, cfg: &InpaintConfig) -> Result<InpaintReport> {
    if samples.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    let mc = enc.config();
    let data = prepare_all(samples, mc)?;
    let per: Vec<(f64, f64)> = data
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let m = eval_masks(mc, cfg.policy, cfg.mask_ratio, cfg.seed, i)?;
            let mut g = Graph::new(Precision::F64);
            let st = enc
                .model
                .forward_stream(&mut g, &enc.params, s, &m.audio, &m.video, GradScope::Full)?;
            let ra = st.recon_a.map(|n| g.value(n).clone());
            let rv = st.recon_v.map(|n| g.value(n).clone());
            let only_a = MaskPair {
                audio: m.audio.clone(),
                video: MaskSet::full(m.video.total()),
            };
            let only_v = MaskPair {
                audio: MaskSet::full(m.audio.total()),
                video: m.video.clone(),
            };
            let (la, _) = reconstruction_loss(ra.as_ref(), None, s, &only_a, cfg.divisor)?;
            let (lv, _) = reconstruction_loss(None, rv.as_ref(), s, &only_v, cfg.divisor)?;
            Ok((la, lv))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok(InpaintReport {
        loss_a: per.iter().map(|p| p.0).sum::<f64>() / n,
        loss_v: per.iter().map(|p| p.1).sum::<f64>() / n,
    })
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_digest<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// One evaluation run's output: a single JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub config_digest: String,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}
