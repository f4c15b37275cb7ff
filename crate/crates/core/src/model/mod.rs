//! Weight-shared dual-stream audio-visual masked autoencoder.
//!
//! Every stream reads the same [`ParamTree`]. A stream is
//! `embed_and_mask -> encode_modality (audio, video) -> joint_three_pass ->
//! decode_joint`, and all of it is recorded on one [`Graph`] so the losses of
//! every stream backpropagate into the shared leaves.
//!
//! Parameter names:
//! - `enc.{audio,video}.{patch.w,patch.b,type,blocks.N.*}`: modality encoders
//! - `joint.blocks.N.*`, `joint.norm.*`: the joint layer used for all three passes
//! - `dec.{mask_token,type}.{audio,video}`, `dec.blocks.N.*`: shared decoder
//! - `dec.{audio,video}.{block.*,norm.*,head.*}`: modality-specific decoder tail

mod config;
mod layers;

use serde::{Deserialize, Serialize};

pub use config::{KdScope, MaskPolicy, ModelConfig, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::masking::MaskSet;
use crate::numerics::{Graph, NodeId, ParamTree, Tensor};
use crate::patchio::{normalize_patch_target, patchify, AVSample, EmbeddingTables, Modality};
use crate::rng::{stream, KeyedRng};
use layers::{block, layer_norm, linear, Init};

/// Where the contrastive and distillation gradients may flow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradScope {
    /// Contrastive and distillation terms reach only the joint layer and decoder.
    EncodersDetached,
    /// All terms flow through every layer on their path.
    #[default]
    Full,
}

fn tag(m: Modality) -> &'static str {
    match m {
        Modality::Audio => "audio",
        Modality::Video => "video",
    }
}

/// A sample tokenized once, with its standardized reconstruction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub audio: Tensor,
    pub video: Tensor,
    pub audio_target: Tensor,
    pub video_target: Tensor,
    pub label: Option<u32>,
}

fn normalized_rows(t: &Tensor) -> Tensor {
    let data = (0..t.rows())
        .flat_map(|r| normalize_patch_target(t.row(r)))
        .collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

impl PreparedSample {
    pub fn new(sample: &AVSample, config: &ModelConfig) -> Result<Self> {
        sample.validate(&config.geometry)?;
        let p = config.geometry.patch;
        let audio = patchify(&sample.audio, p, Modality::Audio)?.tokens;
        let video = patchify(&sample.video, p, Modality::Video)?.tokens;
        Ok(Self {
            audio_target: normalized_rows(&audio),
            video_target: normalized_rows(&video),
            audio,
            video,
            label: sample.label,
        })
    }

    pub fn tokens(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    pub fn targets(&self, m: Modality) -> &Tensor {
        match m {
            Modality::Audio => &self.audio_target,
            Modality::Video => &self.video_target,
        }
    }
}

pub fn prepare_all(samples: &[AVSample], config: &ModelConfig) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| PreparedSample::new(s, config)).collect()
}

/// Outputs of the three joint passes.
#[derive(Clone, Copy, Debug)]
pub struct JointNodes {
    pub x_joint: NodeId,
    pub c_a: NodeId,
    pub c_v: NodeId,
    pub chi: NodeId,
    /// Per-token output of the video-only pass.
    pub v_tokens: NodeId,
}

/// Graph handles for one stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamNodes {
    pub a_tokens: NodeId,
    pub v_tokens: NodeId,
    /// Meanpools of the encoder outputs as seen by the distillation term.
    pub a_pool: NodeId,
    pub v_pool: NodeId,
    pub x_joint: NodeId,
    pub c_a: NodeId,
    pub c_v: NodeId,
    pub chi: NodeId,
    pub v_joint_tokens: NodeId,
    pub recon_a: Option<NodeId>,
    pub recon_v: Option<NodeId>,
}

/// Concrete values of one stream's products.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamOutput {
    pub a_tokens: Tensor,
    pub v_tokens: Tensor,
    pub x_joint: Tensor,
    pub c_a: Vec<f64>,
    pub c_v: Vec<f64>,
    pub chi: Vec<f64>,
    pub recon_a: Option<Tensor>,
    pub recon_v: Option<Tensor>,
}

impl StreamNodes {
    pub fn materialize(&self, g: &Graph) -> StreamOutput {
        StreamOutput {
            a_tokens: g.value(self.a_tokens).clone(),
            v_tokens: g.value(self.v_tokens).clone(),
            x_joint: g.value(self.x_joint).clone(),
            c_a: g.value(self.c_a).data().to_vec(),
            c_v: g.value(self.c_v).data().to_vec(),
            chi: g.value(self.chi).data().to_vec(),
            recon_a: self.recon_a.map(|n| g.value(n).clone()),
            recon_v: self.recon_v.map(|n| g.value(n).clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct KdcModel {
    pub config: ModelConfig,
    pub tables: EmbeddingTables,
}

/// Initializes every weight: truncated normal (std 0.02) for matrices,
/// embeddings and mask tokens; zero biases; unit layer-norm gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParamTree> {
    config.validate()?;
    let d = config.dim;
    let r = config.mlp_ratio;
    let mut rng = KeyedRng::new(seed, &[stream::INIT]);
    let mut init = Init {
        tree: ParamTree::new(),
        rng: &mut rng,
    };
    for m in [Modality::Audio, Modality::Video] {
        let t = tag(m);
        let layers = match m {
            Modality::Audio => config.ae_layers,
            Modality::Video => config.ve_layers,
        };
        init.linear(&format!("enc.{t}.patch"), config.geometry.token_len(m), d, true)?;
        init.normal(format!("enc.{t}.type"), &[d])?;
        for i in 0..layers {
            init.block(&format!("enc.{t}.blocks.{i}"), d, r)?;
        }
    }
    for i in 0..config.ave_layers {
        init.block(&format!("joint.blocks.{i}"), d, r)?;
    }
    if config.ave_layers > 0 {
        init.norm("joint.norm", d)?;
    }
    for i in 0..config.jd_shared_layers {
        init.block(&format!("dec.blocks.{i}"), d, r)?;
    }
    for m in [Modality::Audio, Modality::Video] {
        let t = tag(m);
        init.normal(format!("dec.mask_token.{t}"), &[d])?;
        init.normal(format!("dec.type.{t}"), &[d])?;
        init.block(&format!("dec.{t}.block"), d, r)?;
        init.norm(&format!("dec.{t}.norm"), d)?;
        init.linear(&format!("dec.{t}.head"), d, config.geometry.token_len(m), true)?;
    }
    Ok(init.tree)
}

/// Parameter-name predicate for the modality-specific encoders (AE/VE),
/// including their patch projections and type embeddings.
pub fn is_modality_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

pub fn is_joint_param(name: &str) -> bool {
    name.starts_with("joint.")
}

impl KdcModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tables = EmbeddingTables::new(&config.geometry, config.dim, config.dim)?;
        Ok(Self { config, tables })
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamTree> {
        init_model(&self.config, seed)
    }

    fn check_mask(&self, m: Modality, mask: &MaskSet) -> Result<()> {
        let n = self.config.geometry.tokens(m);
        if mask.total() != n {
            return Err(Error::Shape(format!(
                "{} mask covers {} tokens, grid has {n}",
                tag(m),
                mask.total()
            )));
        }
        if mask.is_empty() {
            return Err(Error::Shape(format!("{} mask keeps no tokens", tag(m))));
        }
        Ok(())
    }

    /// Patch projection + positional table + modality type embedding for
    /// every token of one modality.
    pub fn embed_tokens(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        tokens: &Tensor,
        m: Modality,
    ) -> Result<NodeId> {
        let t = tag(m);
        let pos = match m {
            Modality::Audio => &self.tables.pos_audio,
            Modality::Video => &self.tables.pos_video,
        };
        if tokens.rows() != pos.rows() || tokens.cols() != self.config.geometry.token_len(m) {
            return Err(Error::Shape(format!(
                "{t} tokens {:?} do not match the configured geometry",
                tokens.shape()
            )));
        }
        let x = g.constant(tokens.clone());
        let x = linear(g, p, &format!("enc.{t}.patch"), x, true)?;
        let pos = g.constant(pos.clone());
        let x = g.add(x, pos)?;
        let ty = g.param(p, &format!("enc.{t}.type"))?;
        g.add_row(x, ty)
    }

    /// Embeds both modalities and keeps only the unmasked rows.
    pub fn embed_and_mask(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        sample: &PreparedSample,
        mask_a: &MaskSet,
        mask_v: &MaskSet,
    ) -> Result<(NodeId, NodeId)> {
        self.check_mask(Modality::Audio, mask_a)?;
        self.check_mask(Modality::Video, mask_v)?;
        let a = self.embed_tokens(g, p, &sample.audio, Modality::Audio)?;
        let a = g.gather_rows(a, mask_a.unmasked())?;
        let v = self.embed_tokens(g, p, &sample.video, Modality::Video)?;
        let v = g.gather_rows(v, mask_v.unmasked())?;
        Ok((a, v))
    }

    /// Modality-specific transformer stack; zero layers is the identity.
    pub fn encode_modality(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        x: NodeId,
        m: Modality,
    ) -> Result<NodeId> {
        let layers = match m {
            Modality::Audio => self.config.ae_layers,
            Modality::Video => self.config.ve_layers,
        };
        let mut h = x;
        for i in 0..layers {
            h = block(g, p, &format!("enc.{}.blocks.{i}", tag(m)), h, self.config.enc_heads)?;
        }
        if !g.value(h).is_finite() {
            return Err(Error::Numeric(format!("{} encoder produced non-finite values", tag(m))));
        }
        Ok(h)
    }

    /// The joint layer followed by its output norm, shared by all three
    /// passes. With zero joint layers this is the identity.
    pub fn joint_layer(&self, g: &mut Graph, p: &ParamTree, x: NodeId) -> Result<NodeId> {
        if self.config.ave_layers == 0 {
            return Ok(x);
        }
        let mut h = x;
        for i in 0..self.config.ave_layers {
            h = block(g, p, &format!("joint.blocks.{i}"), h, self.config.enc_heads)?;
        }
        layer_norm(g, p, "joint.norm", h)
    }

    /// Audio alone, video alone, then the concatenation, all through the
    /// same joint weights.
    pub fn joint_three_pass(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        a_enc: NodeId,
        v_enc: NodeId,
    ) -> Result<JointNodes> {
        let a = self.joint_layer(g, p, a_enc)?;
        let c_a = g.mean_rows(a);
        let v = self.joint_layer(g, p, v_enc)?;
        let c_v = g.mean_rows(v);
        let av = g.concat_rows(&[a_enc, v_enc])?;
        let x_joint = self.joint_layer(g, p, av)?;
        let chi = g.mean_rows(x_joint);
        Ok(JointNodes {
            x_joint,
            c_a,
            c_v,
            chi,
            v_tokens: v,
        })
    }

    fn decoder_input(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        visible: NodeId,
        mask: &MaskSet,
        m: Modality,
    ) -> Result<NodeId> {
        let t = tag(m);
        let n = mask.total();
        let mut full = g.scatter_rows(visible, mask.unmasked(), n)?;
        let masked = mask.masked();
        if !masked.is_empty() {
            let tok = g.param(p, &format!("dec.mask_token.{t}"))?;
            let fill = g.gather_rows(tok, &vec![0; masked.len()])?;
            let fill = g.scatter_rows(fill, &masked, n)?;
            full = g.add(full, fill)?;
        }
        let pos = match m {
            Modality::Audio => &self.tables.pos_audio_dec,
            Modality::Video => &self.tables.pos_video_dec,
        };
        let pos = g.constant(pos.clone());
        let full = g.add(full, pos)?;
        let ty = g.param(p, &format!("dec.type.{t}"))?;
        g.add_row(full, ty)
    }

    fn decoder_tail(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        seq: NodeId,
        mask: &MaskSet,
        m: Modality,
    ) -> Result<Option<NodeId>> {
        let masked = mask.masked();
        if masked.is_empty() {
            return Ok(None);
        }
        let t = tag(m);
        let h = block(g, p, &format!("dec.{t}.block"), seq, self.config.jd_heads)?;
        let h = g.gather_rows(h, &masked)?;
        let h = layer_norm(g, p, &format!("dec.{t}.norm"), h)?;
        Ok(Some(linear(g, p, &format!("dec.{t}.head"), h, true)?))
    }

    /// Rebuilds full-length token sequences (mask tokens at masked
    /// positions), runs the shared decoder over both modalities together and
    /// the modality-specific tails, and returns predictions at masked
    /// positions only, in ascending position order.
    pub fn decode_joint(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        x_joint: NodeId,
        mask_a: &MaskSet,
        mask_v: &MaskSet,
    ) -> Result<(Option<NodeId>, Option<NodeId>)> {
        let ka = mask_a.len();
        let kv = mask_v.len();
        if g.value(x_joint).rows() != ka + kv {
            return Err(Error::Shape(format!(
                "joint sequence has {} rows, masks keep {ka} + {kv}",
                g.value(x_joint).rows()
            )));
        }
        let a_idx: Vec<usize> = (0..ka).collect();
        let v_idx: Vec<usize> = (ka..ka + kv).collect();
        let xa = g.gather_rows(x_joint, &a_idx)?;
        let xv = g.gather_rows(x_joint, &v_idx)?;
        let fa = self.decoder_input(g, p, xa, mask_a, Modality::Audio)?;
        let fv = self.decoder_input(g, p, xv, mask_v, Modality::Video)?;
        let mut seq = g.concat_rows(&[fa, fv])?;
        for i in 0..self.config.jd_shared_layers {
            seq = block(g, p, &format!("dec.blocks.{i}"), seq, self.config.jd_heads)?;
        }
        let na = mask_a.total();
        let nv = mask_v.total();
        let sa = g.gather_rows(seq, &(0..na).collect::<Vec<_>>())?;
        let sv = g.gather_rows(seq, &(na..na + nv).collect::<Vec<_>>())?;
        let ra = self.decoder_tail(g, p, sa, mask_a, Modality::Audio)?;
        let rv = self.decoder_tail(g, p, sv, mask_v, Modality::Video)?;
        Ok((ra, rv))
    }

    /// One full stream. With [`GradScope::EncodersDetached`] the contrastive and
    /// distillation inputs are computed from detached encoder outputs, so
    /// those terms cannot reach the modality encoders; the decoder path is
    /// unaffected.
    pub fn forward_stream(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        sample: &PreparedSample,
        mask_a: &MaskSet,
        mask_v: &MaskSet,
        scope: GradScope,
    ) -> Result<StreamNodes> {
        let (a, v) = self.embed_and_mask(g, p, sample, mask_a, mask_v)?;
        let a_enc = self.encode_modality(g, p, a, Modality::Audio)?;
        let v_enc = self.encode_modality(g, p, v, Modality::Video)?;

        let (joint, chi) = match scope {
            GradScope::Full => {
                let j = self.joint_three_pass(g, p, a_enc, v_enc)?;
                (j, j.chi)
            }
            GradScope::EncodersDetached => {
                let a_ctx = g.detach(a_enc);
                let v_ctx = g.detach(v_enc);
                let j = self.joint_three_pass(g, p, a_ctx, v_ctx)?;
                // reconstruction path keeps its gradient into the encoders
                let av = g.concat_rows(&[a_enc, v_enc])?;
                let x_joint = self.joint_layer(g, p, av)?;
                (
                    JointNodes {
                        x_joint,
                        ..j
                    },
                    j.chi,
                )
            }
        };
        let (pool_a_src, pool_v_src) = match scope {
            GradScope::Full => (a_enc, v_enc),
            GradScope::EncodersDetached => (g.detach(a_enc), g.detach(v_enc)),
        };
        let a_pool = g.mean_rows(pool_a_src);
        let v_pool = g.mean_rows(pool_v_src);
        let (recon_a, recon_v) = self.decode_joint(g, p, joint.x_joint, mask_a, mask_v)?;
        Ok(StreamNodes {
            a_tokens: a_enc,
            v_tokens: v_enc,
            a_pool,
            v_pool,
            x_joint: joint.x_joint,
            c_a: joint.c_a,
            c_v: joint.c_v,
            chi,
            v_joint_tokens: joint.v_tokens,
            recon_a,
            recon_v,
        })
    }

    /// Unmasked encoding used at evaluation time: no decoder.
    pub fn encode_unmasked(
        &self,
        g: &mut Graph,
        p: &ParamTree,
        sample: &PreparedSample,
    ) -> Result<JointNodes> {
        let g_ = &self.config.geometry;
        let ma = MaskSet::full(g_.tokens(Modality::Audio));
        let mv = MaskSet::full(g_.tokens(Modality::Video));
        let (a, v) = self.embed_and_mask(g, p, sample, &ma, &mv)?;
        let a = self.encode_modality(g, p, a, Modality::Audio)?;
        let v = self.encode_modality(g, p, v, Modality::Video)?;
        self.joint_three_pass(g, p, a, v)
    }
}
