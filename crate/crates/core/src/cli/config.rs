//! Run configuration: defaults <- preset <- JSON file <- command-line
//! overrides, validated into one [`RunConfig`].

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalkit::{FinetuneConfig, InpaintConfig};
use crate::losses::WeightMode;
use crate::model::{KdScope, MaskPolicy, ModelConfig};
use crate::trainer::{LrSchedule, MakdConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// `.avt` training set (pretrain, finetune) or evaluation set (eval).
    pub train: Option<PathBuf>,
    /// Separate held-out `.avt` set; without it finetune splits `train`.
    pub eval: Option<PathBuf>,
    /// Samples held out of `train` when `eval` is absent.
    pub holdout: usize,
}

impl Default for DataPaths {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            holdout: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataOptions {
    pub samples: usize,
    pub classes: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GenDataOptions {
    fn default() -> Self {
        Self {
            samples: 64,
            classes: 4,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalTask {
    Retrieval,
    Inpaint,
    Localization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub tasks: Vec<EvalTask>,
    pub ks: Vec<usize>,
    /// Mask ratio for corpus encoding; `null` encodes unmasked.
    pub mask_ratio: Option<f64>,
    pub inpaint: InpaintConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tasks: vec![EvalTask::Retrieval, EvalTask::Inpaint, EvalTask::Localization],
            ks: vec![1, 5, 10],
            mask_ratio: None,
            inpaint: InpaintConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    /// Synthetic samples in the checked batch.
    pub batch: usize,
    pub rel_tol: f64,
    pub h: f64,
    /// Coordinates checked per tensor; `null` checks every coordinate.
    pub per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            batch: 2,
            rel_tol: 1e-4,
            h: 1e-6,
            per_param: Some(4),
            seed: 0,
        }
    }
}

/// Everything one invocation needs. Every field has a default; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataPaths,
    /// Output file (gen-data) or directory (other commands).
    pub out: Option<PathBuf>,
    /// Input checkpoint: the encoder for finetune/eval, a resume point for
    /// pretrain.
    pub checkpoint: Option<PathBuf>,
    pub gen_data: GenDataOptions,
    pub finetune: FinetuneConfig,
    pub eval: EvalOptions,
    pub gradcheck: GradcheckOptions,
}

pub const PRESETS: &[&str] = &[
    "toy64",
    "cavmae-baseline",
    "kdc-dual-nooverlap",
    "kdc-dual-overlap",
    "kdc-triple-overlap",
    "kdc-aa-vv",
    "kdc-dynamic",
    "makd",
];

/// Desk-scale training on the toy model: the standard schedule shape with a
/// learning rate suited to a ~120k-parameter network.
fn toy64() -> RunConfig {
    let mut c = RunConfig::default();
    c.train.base_lr = 1e-3;
    c.train.batch_size = 8;
    c.train.epochs = 30;
    c.train.schedule = LrSchedule::PRETRAIN;
    c.gen_data.samples = 64;
    c
}

pub fn preset(name: &str) -> Result<RunConfig> {
    let mut c = toy64();
    match name {
        "toy64" | "kdc-dual-nooverlap" => {}
        "cavmae-baseline" => {
            c.model.n_streams = 1;
            c.train.objective.weights.lambda_kd = 0.0;
        }
        "kdc-dual-overlap" => c.model.mask_policy = MaskPolicy::Overlapping,
        "kdc-triple-overlap" => {
            c.model.n_streams = 3;
            c.model.mask_policy = MaskPolicy::Overlapping;
        }
        "kdc-aa-vv" => c.model.kd_scope = KdScope::JointAudioVideo,
        "kdc-dynamic" => c.train.objective.weights.mode = WeightMode::Dynamic,
        "makd" => {
            c.model.mask_policy = MaskPolicy::Overlapping;
            c.train.makd = Some(MakdConfig::default());
        }
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; known: {}",
                PRESETS.join(", ")
            )))
        }
    }
    Ok(c)
}

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Sets the value at a dotted path, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{}: not an object", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    unreachable!()
}

fn decode(value: Value, origin: &str) -> Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("{origin}: {path}: {}", e.into_inner()))
    })
}

/// Resolves defaults <- preset <- file <- overrides. `overrides` are
/// `(dotted path, JSON value)` pairs applied in order.
pub fn resolve_config(
    preset_name: Option<&str>,
    file_text: Option<&str>,
    overrides: &[(String, Value)],
) -> Result<RunConfig> {
    let base = match preset_name {
        Some(p) => preset(p)?,
        None => RunConfig::default(),
    };
    let mut v = serde_json::to_value(&base)?;
    if let Some(text) = file_text {
        let file: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?
        };
        if !file.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        // type-check the file on its own so diagnostics name its paths
        decode(file.clone(), "config file")?;
        merge(&mut v, file);
    }
    for (path, value) in overrides {
        set_path(&mut v, path, value.clone())?;
    }
    let cfg = decode(v, "resolved config")?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    cfg.finetune.validate()?;
    Ok(cfg)
}
