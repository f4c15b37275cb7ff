//! Training objectives: cross-modal contrastive, masked reconstruction,
//! probability projection + symmetric KL self-distillation, and the loss mixer.
//!
//! Every loss has a graph form (`*_node`) used in training and a plain-value
//! form that evaluates the same graph on constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{MaskPair, MaskSet};
use crate::model::{GradScope, KdScope, KdcModel, PreparedSample, StreamNodes, StreamOutput};
use crate::numerics::{Graph, NodeId, ParamTree, Precision, Tensor};
use crate::patchio::Modality;

/// Floor applied to probabilities before they enter a logarithm.
pub const PROB_EPS: f64 = 1e-8;

pub const LAMBDA_C: f64 = 0.01;
pub const LAMBDA_KD: f64 = 10.0;

pub const U_C: &str = "loss.u_c";
pub const U_KD: &str = "loss.u_kd";

/// Non-negative entries summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!(
                "not a distribution (len {}, sum {sum})",
                p.len()
            )));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn eval<F>(f: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::new(Precision::F64);
    let n = f(&mut g)?;
    Ok(g.value(n).clone())
}

/// Cosine similarities `s[i][j] = <c_v_i, c_a_j> / (|c_v_i| |c_a_j|)`.
pub fn similarity_node(g: &mut Graph, c_v: NodeId, c_a: NodeId) -> Result<NodeId> {
    if g.shape(c_v) != g.shape(c_a) {
        return Err(Error::dim(
            "similarity_matrix",
            format!("{:?} vs {:?}", g.shape(c_v), g.shape(c_a)),
        ));
    }
    let v = g.l2_normalize_rows(c_v)?;
    let a = g.l2_normalize_rows(c_a)?;
    g.matmul_nt(v, a)
}

pub fn similarity_matrix(c_v: &Tensor, c_a: &Tensor) -> Result<Tensor> {
    eval(|g| {
        let v = g.constant(c_v.clone());
        let a = g.constant(c_a.clone());
        similarity_node(g, v, a)
    })
}

fn row_nce(g: &mut Graph, s: NodeId, tau: f64) -> Result<NodeId> {
    let n = g.shape(s)[0];
    let logits = g.scale(s, 1.0 / tau);
    let ls = g.log_softmax(logits)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let d = g.pick_flat(ls, &diag)?;
    let m = g.mean_all(d);
    Ok(g.scale(m, -1.0))
}

/// InfoNCE over rows of `s` (each video anchor against all audio candidates);
/// `symmetric` averages with the column direction.
pub fn contrastive_node(g: &mut Graph, s: NodeId, tau: f64, symmetric: bool) -> Result<NodeId> {
    let sh = g.shape(s).to_vec();
    if sh.len() != 2 || sh[0] != sh[1] || sh[0] == 0 {
        return Err(Error::dim("contrastive_loss", format!("{sh:?} is not square")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let fwd = row_nce(g, s, tau)?;
    if !symmetric {
        return Ok(fwd);
    }
    let st = g.transpose(s);
    let bwd = row_nce(g, st, tau)?;
    let both = g.add(fwd, bwd)?;
    Ok(g.scale(both, 0.5))
}

pub fn contrastive_loss(s: &Tensor, tau: f64, symmetric: bool) -> Result<f64> {
    eval(|g| {
        let s = g.constant(s.clone());
        contrastive_node(g, s, tau, symmetric)
    })?
    .item()
    // negating a zero mean yields -0 for a single pair
    .map(|v| v + 0.0)
}

/// How the squared error of one modality is normalized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconDivisor {
    /// Divide by the number of masked patches.
    #[default]
    PatchCount,
    /// Divide by the number of masked scalar elements.
    ElementCount,
}

fn modality_recon(
    g: &mut Graph,
    recon: Option<NodeId>,
    targets: &Tensor,
    mask: &MaskSet,
    divisor: ReconDivisor,
) -> Result<Option<NodeId>> {
    let masked = mask.masked();
    let Some(pred) = recon else {
        if masked.is_empty() {
            return Ok(None);
        }
        return Err(Error::Contract(format!(
            "{} masked patches but no reconstruction",
            masked.len()
        )));
    };
    let cols = targets.cols();
    if g.shape(pred) != [masked.len(), cols] {
        return Err(Error::dim(
            "reconstruction_loss",
            format!("prediction {:?} vs {} masked x {cols}", g.shape(pred), masked.len()),
        ));
    }
    let data = masked.iter().flat_map(|&i| targets.row(i).to_vec()).collect();
    let t = g.constant(Tensor::matrix(masked.len(), cols, data)?);
    let d = g.sub(pred, t)?;
    let sq = g.square(d);
    let s = g.sum_all(sq);
    let k = match divisor {
        ReconDivisor::PatchCount => masked.len(),
        ReconDivisor::ElementCount => masked.len() * cols,
    };
    Ok(Some(g.scale(s, 1.0 / k as f64)))
}

/// Squared error against standardized targets at masked positions, summed
/// over modalities. The flag is set when a modality had nothing masked and
/// contributed 0.
pub fn reconstruction_node(
    g: &mut Graph,
    recon_a: Option<NodeId>,
    recon_v: Option<NodeId>,
    sample: &PreparedSample,
    masks: &MaskPair,
    divisor: ReconDivisor,
) -> Result<(NodeId, bool)> {
    let a = modality_recon(g, recon_a, sample.targets(Modality::Audio), &masks.audio, divisor)?;
    let v = modality_recon(g, recon_v, sample.targets(Modality::Video), &masks.video, divisor)?;
    let degenerate = a.is_none() || v.is_none();
    let node = match (a, v) {
        (Some(a), Some(v)) => g.add(a, v)?,
        (Some(x), None) | (None, Some(x)) => x,
        (None, None) => g.constant(Tensor::scalar(0.0)),
    };
    Ok((node, degenerate))
}

/// Plain-value reconstruction loss for one sample.
pub fn reconstruction_loss(
    recon_a: Option<&Tensor>,
    recon_v: Option<&Tensor>,
    sample: &PreparedSample,
    masks: &MaskPair,
    divisor: ReconDivisor,
) -> Result<(f64, bool)> {
    let mut g = Graph::new(Precision::F64);
    let a = recon_a.map(|t| g.constant(t.clone()));
    let v = recon_v.map(|t| g.constant(t.clone()));
    let (n, flag) = reconstruction_node(&mut g, a, v, sample, masks, divisor)?;
    Ok((g.scalar_value(n)?, flag))
}

/// `(chi - min chi) / sum`, or uniform when `chi` is constant.
pub fn project_node(g: &mut Graph, chi: NodeId) -> Result<NodeId> {
    let n = g.value(chi).numel();
    if n < 2 {
        return Err(Error::dim("project_to_prob", format!("need >= 2 entries, got {n}")));
    }
    let mn = g.min_all(chi);
    let shifted = g.sub_scalar(chi, mn)?;
    let total = g.sum_all(shifted);
    if g.scalar_value(total)? == 0.0 {
        let shape = g.shape(chi).to_vec();
        return Ok(g.constant(Tensor::filled(&shape, 1.0 / n as f64)));
    }
    g.div_scalar(shifted, total)
}

pub fn project_to_prob(chi: &[f64]) -> Result<ProbVector> {
    let t = eval(|g| {
        let c = g.constant(Tensor::vector(chi.to_vec()));
        project_node(g, c)
    })?;
    ProbVector::new(t.into_data())
}

fn floor_ln(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    let f = g.clamp_min(p, PROB_EPS);
    g.ln(f)
}

/// `sum p1 (ln p1 - ln p2)`, with both logarithm arguments floored at
/// [`PROB_EPS`].
pub fn kl_node(g: &mut Graph, p1: NodeId, p2: NodeId) -> Result<NodeId> {
    if g.shape(p1) != g.shape(p2) {
        return Err(Error::Shape(format!(
            "kl_divergence over lengths {:?} and {:?}",
            g.shape(p1),
            g.shape(p2)
        )));
    }
    let l1 = floor_ln(g, p1)?;
    let l2 = floor_ln(g, p2)?;
    let d = g.sub(l1, l2)?;
    let t = g.mul(p1, d)?;
    Ok(g.sum_all(t))
}

/// Symmetrized KL: `(D(p1||p2) + D(p2||p1)) / 2`.
pub fn kd_node(g: &mut Graph, p1: NodeId, p2: NodeId) -> Result<NodeId> {
    let a = kl_node(g, p1, p2)?;
    let b = kl_node(g, p2, p1)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, 0.5))
}

/// Mean of the pairwise symmetric KL over all unordered pairs (2 or 3 inputs).
pub fn multi_stream_kd_node(g: &mut Graph, probs: &[NodeId]) -> Result<NodeId> {
    match probs {
        [a, b] => kd_node(g, *a, *b),
        [a, b, c] => {
            let ab = kd_node(g, *a, *b)?;
            let ac = kd_node(g, *a, *c)?;
            let bc = kd_node(g, *b, *c)?;
            let s = g.add(ab, ac)?;
            let s = g.add(s, bc)?;
            Ok(g.scale(s, 1.0 / 3.0))
        }
        _ => Err(Error::Config(format!(
            "distillation needs 2 or 3 streams, got {}",
            probs.len()
        ))),
    }
}

fn prob_consts(g: &mut Graph, ps: &[&ProbVector]) -> Vec<NodeId> {
    ps.iter()
        .map(|p| g.constant(Tensor::vector(p.as_slice().to_vec())))
        .collect()
}

pub fn kl_divergence(p1: &ProbVector, p2: &ProbVector) -> Result<f64> {
    eval(|g| {
        let n = prob_consts(g, &[p1, p2]);
        kl_node(g, n[0], n[1])
    })?
    .item()
}

pub fn kd_loss(p1: &ProbVector, p2: &ProbVector) -> Result<f64> {
    eval(|g| {
        let n = prob_consts(g, &[p1, p2]);
        kd_node(g, n[0], n[1])
    })?
    .item()
}

pub fn multi_stream_kd(probs: &[ProbVector]) -> Result<f64> {
    eval(|g| {
        let refs: Vec<&ProbVector> = probs.iter().collect();
        let n = prob_consts(g, &refs);
        multi_stream_kd_node(g, &n)
    })?
    .item()
}

/// Distillation across the streams of one sample: the joint meanpool, plus
/// (in the wider scope) the audio- and video-encoder meanpools, each
/// projected to a distribution.
pub fn scoped_kd_node(g: &mut Graph, streams: &[StreamNodes], scope: KdScope) -> Result<NodeId> {
    if streams.len() < 2 {
        return Err(Error::Config(format!(
            "distillation needs at least 2 streams, got {}",
            streams.len()
        )));
    }
    let term = |g: &mut Graph, pick: fn(&StreamNodes) -> NodeId| -> Result<NodeId> {
        let probs = streams
            .iter()
            .map(|s| project_node(g, pick(s)))
            .collect::<Result<Vec<_>>>()?;
        multi_stream_kd_node(g, &probs)
    };
    let joint = term(g, |s| s.chi)?;
    match scope {
        KdScope::JointOnly => Ok(joint),
        KdScope::JointAudioVideo => {
            let aa = term(g, |s| s.a_pool)?;
            let vv = term(g, |s| s.v_pool)?;
            let s = g.add(joint, aa)?;
            let s = g.add(s, vv)?;
            Ok(g.scale(s, 1.0 / 3.0))
        }
    }
}

fn meanpool(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for r in 0..t.rows() {
        for (o, x) in out.iter_mut().zip(t.row(r)) {
            *o += x;
        }
    }
    out.iter().map(|x| x / t.rows() as f64).collect()
}

/// Plain-value form of [`scoped_kd_node`].
pub fn scoped_kd(streams: &[StreamOutput], scope: KdScope) -> Result<f64> {
    if streams.len() < 2 {
        return Err(Error::Config(format!(
            "distillation needs at least 2 streams, got {}",
            streams.len()
        )));
    }
    let project = |f: &dyn Fn(&StreamOutput) -> Vec<f64>| -> Result<Vec<ProbVector>> {
        streams.iter().map(|s| project_to_prob(&f(s))).collect()
    };
    let joint = multi_stream_kd(&project(&|s| s.chi.clone())?)?;
    match scope {
        KdScope::JointOnly => Ok(joint),
        KdScope::JointAudioVideo => {
            let aa = multi_stream_kd(&project(&|s| meanpool(&s.a_tokens))?)?;
            let vv = multi_stream_kd(&project(&|s| meanpool(&s.v_tokens))?)?;
            Ok((joint + aa + vv) * (1.0 / 3.0))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Static,
    /// Trainable `u_c`, `u_kd` with effective weight `exp(u)`.
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_kd: f64,
    pub mode: WeightMode,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: LAMBDA_C,
            lambda_kd: LAMBDA_KD,
            mode: WeightMode::Static,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| match self.mode {
            WeightMode::Static => x >= 0.0 && x.is_finite(),
            WeightMode::Dynamic => x > 0.0 && x.is_finite(),
        };
        if !ok(self.lambda_c) || !ok(self.lambda_kd) {
            return Err(Error::Config(format!(
                "invalid loss weights ({}, {}) for {:?} mode",
                self.lambda_c, self.lambda_kd, self.mode
            )));
        }
        Ok(())
    }

    /// In dynamic mode, adds `u_c = ln lambda_c` and `u_kd = ln lambda_kd`
    /// to the tree so training starts at the static operating point.
    pub fn install(&self, tree: &mut ParamTree) -> Result<()> {
        self.validate()?;
        if self.mode == WeightMode::Dynamic {
            tree.insert(U_C, Tensor::scalar(self.lambda_c.ln()))?;
            tree.insert(U_KD, Tensor::scalar(self.lambda_kd.ln()))?;
        }
        Ok(())
    }

    /// Effective weights from the current tree.
    pub fn effective(&self, tree: &ParamTree) -> Result<(f64, f64)> {
        let mut g = Graph::new(Precision::F64);
        let (c, kd) = self.weight_nodes(&mut g, tree)?;
        Ok((g.scalar_value(c)?, g.scalar_value(kd)?))
    }

    // exp(u) written as lambda * exp(u - ln lambda): identical function, but
    // at u = ln lambda it returns lambda exactly, so the dynamic mixer
    // reproduces the static one bit for bit at initialization.
    fn dynamic_weight(g: &mut Graph, tree: &ParamTree, name: &str, lambda: f64) -> Result<NodeId> {
        let u = g.param(tree, name)?;
        let d = g.add_const(u, -lambda.ln());
        let e = g.exp(d);
        Ok(g.scale(e, lambda))
    }

    fn weight_nodes(&self, g: &mut Graph, tree: &ParamTree) -> Result<(NodeId, NodeId)> {
        match self.mode {
            WeightMode::Static => Ok((
                g.constant(Tensor::scalar(self.lambda_c)),
                g.constant(Tensor::scalar(self.lambda_kd)),
            )),
            WeightMode::Dynamic => Ok((
                Self::dynamic_weight(g, tree, U_C, self.lambda_c)?,
                Self::dynamic_weight(g, tree, U_KD, self.lambda_kd)?,
            )),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MixNodes {
    pub total: NodeId,
    pub w_c: NodeId,
    pub w_kd: NodeId,
}

/// `L_r + w_c L_c + w_kd L_kd`.
pub fn mix_node(
    g: &mut Graph,
    tree: &ParamTree,
    l_r: NodeId,
    l_c: NodeId,
    l_kd: NodeId,
    weights: &LossWeights,
) -> Result<MixNodes> {
    for (name, n) in [("L_r", l_r), ("L_c", l_c), ("L_kd", l_kd)] {
        let v = g.scalar_value(n)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} is {v}")));
        }
    }
    let (w_c, w_kd) = weights.weight_nodes(g, tree)?;
    let (c, kd) = match weights.mode {
        WeightMode::Static => (
            g.scale(l_c, weights.lambda_c),
            g.scale(l_kd, weights.lambda_kd),
        ),
        WeightMode::Dynamic => (g.mul(l_c, w_c)?, g.mul(l_kd, w_kd)?),
    };
    let t = g.add(l_r, c)?;
    let total = g.add(t, kd)?;
    let v = g.scalar_value(total)?;
    if !v.is_finite() {
        let wc = g.scalar_value(c)?;
        let wk = g.scalar_value(kd)?;
        let culprit = if !wc.is_finite() { "w_c * L_c" } else if !wk.is_finite() { "w_kd * L_kd" } else { "sum" };
        return Err(Error::Numeric(format!("total loss is {v} (from {culprit})")));
    }
    Ok(MixNodes { total, w_c, w_kd })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamLoss {
    pub l_r: f64,
    pub l_c: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_r: f64,
    pub l_c: f64,
    pub l_kd: f64,
    pub w_c: f64,
    pub w_kd: f64,
    pub total: f64,
    pub streams: Vec<StreamLoss>,
    /// Some modality had no masked patches and contributed no reconstruction.
    pub recon_degenerate: bool,
}

/// Plain-value mixer.
pub fn mix(l_r: f64, l_c: f64, l_kd: f64, weights: &LossWeights, tree: &ParamTree) -> Result<LossReport> {
    let mut g = Graph::new(Precision::F64);
    let r = g.constant(Tensor::scalar(l_r));
    let c = g.constant(Tensor::scalar(l_c));
    let k = g.constant(Tensor::scalar(l_kd));
    let m = mix_node(&mut g, tree, r, c, k, weights)?;
    Ok(LossReport {
        l_r,
        l_c,
        l_kd,
        w_c: g.scalar_value(m.w_c)?,
        w_kd: g.scalar_value(m.w_kd)?,
        total: g.scalar_value(m.total)?,
        streams: Vec::new(),
        recon_degenerate: false,
    })
}

/// Which terms enter the objective and how.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveSpec {
    pub weights: LossWeights,
    pub scope: GradScope,
    pub symmetric_contrastive: bool,
    pub recon_divisor: ReconDivisor,
    pub recon: bool,
    pub distill: bool,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            scope: GradScope::Full,
            symmetric_contrastive: false,
            recon_divisor: ReconDivisor::PatchCount,
            recon: true,
            distill: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub total: NodeId,
    pub l_r: NodeId,
    pub l_c: NodeId,
    pub l_kd: NodeId,
    pub w_c: NodeId,
    pub w_kd: NodeId,
    pub per_stream: Vec<(NodeId, NodeId)>,
    pub streams: Vec<Vec<StreamNodes>>,
    pub recon_degenerate: bool,
}

impl Objective {
    pub fn report(&self, g: &Graph) -> Result<LossReport> {
        let v = |n| g.scalar_value(n);
        Ok(LossReport {
            l_r: v(self.l_r)?,
            l_c: v(self.l_c)?,
            l_kd: v(self.l_kd)?,
            w_c: v(self.w_c)?,
            w_kd: v(self.w_kd)?,
            total: v(self.total)?,
            streams: self
                .per_stream
                .iter()
                .map(|&(r, c)| Ok(StreamLoss { l_r: v(r)?, l_c: v(c)? }))
                .collect::<Result<_>>()?,
            recon_degenerate: self.recon_degenerate,
        })
    }
}

fn mean_of(g: &mut Graph, xs: &[NodeId]) -> Result<NodeId> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / xs.len() as f64))
}

/// Records every stream over the batch and assembles the total loss.
/// `masks[s][i]` is the mask pair stream `s` applies to sample `i`.
pub fn build_objective(
    g: &mut Graph,
    params: &ParamTree,
    model: &KdcModel,
    batch: &[PreparedSample],
    masks: &[Vec<MaskPair>],
    spec: &ObjectiveSpec,
) -> Result<Objective> {
    if batch.is_empty() || masks.is_empty() {
        return Err(Error::Contract("empty batch or no streams".into()));
    }
    if masks.iter().any(|m| m.len() != batch.len()) {
        return Err(Error::Contract("one mask pair per sample per stream required".into()));
    }
    let mut streams = Vec::with_capacity(masks.len());
    let mut per_stream = Vec::with_capacity(masks.len());
    let mut degenerate = false;
    for stream_masks in masks {
        let nodes = batch
            .iter()
            .zip(stream_masks)
            .map(|(s, m)| model.forward_stream(g, params, s, &m.audio, &m.video, spec.scope))
            .collect::<Result<Vec<_>>>()?;

        let l_r = if spec.recon {
            let mut terms = Vec::with_capacity(batch.len());
            for ((s, m), n) in batch.iter().zip(stream_masks).zip(&nodes) {
                let (t, d) =
                    reconstruction_node(g, n.recon_a, n.recon_v, s, m, spec.recon_divisor)?;
                degenerate |= d;
                terms.push(t);
            }
            mean_of(g, &terms)?
        } else {
            g.constant(Tensor::scalar(0.0))
        };

        let cv: Vec<NodeId> = nodes.iter().map(|n| n.c_v).collect();
        let ca: Vec<NodeId> = nodes.iter().map(|n| n.c_a).collect();
        let cv = g.concat_rows(&cv)?;
        let ca = g.concat_rows(&ca)?;
        let s = similarity_node(g, cv, ca)?;
        let l_c = contrastive_node(g, s, model.config.tau, spec.symmetric_contrastive)?;

        per_stream.push((l_r, l_c));
        streams.push(nodes);
    }
    let l_r = mean_of(g, &per_stream.iter().map(|x| x.0).collect::<Vec<_>>())?;
    let l_c = mean_of(g, &per_stream.iter().map(|x| x.1).collect::<Vec<_>>())?;
    let l_kd = if spec.distill && streams.len() >= 2 {
        let mut terms = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let of_sample: Vec<StreamNodes> = streams.iter().map(|s| s[i]).collect();
            terms.push(scoped_kd_node(g, &of_sample, model.config.kd_scope)?);
        }
        mean_of(g, &terms)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let m = mix_node(g, params, l_r, l_c, l_kd, &spec.weights)?;
    Ok(Objective {
        total: m.total,
        l_r,
        l_c,
        l_kd,
        w_c: m.w_c,
        w_kd: m.w_kd,
        per_stream,
        streams,
        recon_degenerate: degenerate,
    })
}
