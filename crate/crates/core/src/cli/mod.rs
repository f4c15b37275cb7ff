//! Command-line entry point: `gen-data`, `pretrain`, `finetune`, `eval` and
//! `gradcheck`. Exit codes: 0 success, 1 usage or configuration error,
//! 2 runtime failure.

mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

pub use config::{
    preset, resolve_config, set_path, DataPaths, EvalOptions, EvalTask, GenDataOptions,
    GradcheckOptions, RunConfig, PRESETS,
};

use crate::error::{Error, Result};
use crate::evalkit::{
    config_digest, encode_corpus, finetune_classify, inpaint_eval, localization_score,
    retrieval_at_k, split_holdout, Encoder, EvalReport,
};
use crate::losses::build_objective;
use crate::model::{init_model, prepare_all, KdcModel};
use crate::numerics::{grad_check, CoordSelection, GradCheckOptions};
use crate::patchio::{read_avt, synth_dataset, write_avt, AVSample};
use crate::trainer::{draw_masks, load_checkpoint, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "kdc-mae", version, about = "Dual-stream audio-visual masked autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset to an .avt file.
    GenData(Common),
    /// Pretrain (or resume from --checkpoint) on an .avt dataset.
    Pretrain(Common),
    /// Train a classifier head on a pretrained encoder and report accuracy.
    Finetune(Common),
    /// Retrieval, inpainting and localization metrics for a checkpoint.
    Eval(Common),
    /// Compare autodiff gradients of the full objective with finite differences.
    Gradcheck(Common),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cmd {
    GenData,
    Pretrain,
    Finetune,
    Eval,
    Gradcheck,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named starting point, applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Override any field: `--set train.epochs=5` (value parsed as JSON,
    /// else taken as a string).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
    /// Output file (gen-data) or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training (or, for eval, evaluation) .avt dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out .avt dataset.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed of the command being run.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    lambda_kd: Option<f64>,
    #[arg(long)]
    n_streams: Option<usize>,
    /// complementary | overlapping | identical
    #[arg(long)]
    mask_policy: Option<String>,
    /// Finetune mode: av | a | v
    #[arg(long)]
    mode: Option<String>,
    /// Finetune the head only.
    #[arg(long)]
    frozen: bool,
}

fn parse_set(s: &str) -> Result<(String, Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects PATH=VALUE, got {s:?}")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path.to_string(), value))
}

impl Common {
    fn overrides(&self, cmd: Cmd) -> Result<Vec<(String, Value)>> {
        let mut o: Vec<(String, Value)> = Vec::new();
        let mut put = |path: &str, v: Value| o.push((path.to_string(), v));
        let path = |p: &Path| Value::String(p.to_string_lossy().into_owned());
        if let Some(p) = &self.out {
            put("out", path(p));
        }
        if let Some(p) = &self.data {
            put("data.train", path(p));
        }
        if let Some(p) = &self.eval_data {
            put("data.eval", path(p));
        }
        if let Some(p) = &self.checkpoint {
            put("checkpoint", path(p));
        }
        if let Some(s) = self.seed {
            let target = match cmd {
                Cmd::GenData => "gen_data.seed",
                Cmd::Pretrain => "train.seed",
                Cmd::Finetune => "finetune.seed",
                Cmd::Eval => "eval.inpaint.seed",
                Cmd::Gradcheck => "gradcheck.seed",
            };
            put(target, s.into());
        }
        if let Some(v) = self.samples {
            put("gen_data.samples", v.into());
        }
        if let Some(v) = self.classes {
            put("gen_data.classes", v.into());
        }
        if let Some(v) = self.noise {
            put("gen_data.noise_sigma", v.into());
        }
        if let Some(v) = self.epochs {
            let target = if cmd == Cmd::Finetune { "finetune.epochs" } else { "train.epochs" };
            put(target, v.into());
        }
        if let Some(v) = self.batch_size {
            let target = if cmd == Cmd::Finetune { "finetune.batch_size" } else { "train.batch_size" };
            put(target, v.into());
        }
        if let Some(v) = self.lr {
            let target = if cmd == Cmd::Finetune { "finetune.base_lr" } else { "train.base_lr" };
            put(target, v.into());
        }
        if let Some(v) = self.lambda_c {
            put("train.objective.weights.lambda_c", v.into());
        }
        if let Some(v) = self.lambda_kd {
            put("train.objective.weights.lambda_kd", v.into());
        }
        if let Some(v) = self.n_streams {
            put("model.n_streams", v.into());
        }
        if let Some(v) = &self.mask_policy {
            put("model.mask_policy", Value::String(v.clone()));
        }
        if let Some(v) = &self.mode {
            put("finetune.mode", Value::String(v.clone()));
        }
        if self.frozen {
            put("finetune.frozen", true.into());
        }
        for s in &self.set {
            o.push(parse_set(s)?);
        }
        Ok(o)
    }
}

fn require<'a>(v: &'a Option<PathBuf>, field: &str, flag: &str) -> Result<&'a PathBuf> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("missing required field `{field}` (set it in the config or pass {flag})")))
}

fn check_required(cmd: Cmd, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Cmd::GenData => {
            require(&cfg.out, "out", "--out")?;
        }
        Cmd::Pretrain => {
            require(&cfg.data.train, "data.train", "--data")?;
            require(&cfg.out, "out", "--out")?;
        }
        Cmd::Finetune => {
            require(&cfg.data.train, "data.train", "--data")?;
            require(&cfg.checkpoint, "checkpoint", "--checkpoint")?;
        }
        Cmd::Eval => {
            require(&cfg.checkpoint, "checkpoint", "--checkpoint")?;
            if cfg.data.train.is_none() && cfg.data.eval.is_none() {
                require(&cfg.data.eval, "data.eval", "--eval-data")?;
            }
        }
        Cmd::Gradcheck => {}
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("KDC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Error::Config(format!("KDC_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool may already exist when embedded in another program
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn echo_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
    Ok(())
}

fn emit_report(cfg: &RunConfig, report: &EvalReport, name: &str) -> Result<()> {
    println!("{}", serde_json::to_string(report)?);
    if let Some(dir) = &cfg.out {
        echo_config(dir, cfg)?;
        report.write(dir.join(name))?;
    }
    Ok(())
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let g = &cfg.gen_data;
    let samples = synth_dataset(g.samples, g.classes, g.noise_sigma, &cfg.model.geometry, g.seed)?;
    let out = cfg.out.as_ref().expect("checked");
    write_avt(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let samples = read_avt(cfg.data.train.as_ref().expect("checked"))?;
    let out = cfg.out.as_ref().expect("checked");
    let mut trainer = match &cfg.checkpoint {
        Some(p) => Trainer::from_checkpoint(load_checkpoint(p)?, &samples)?,
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), &samples)?,
    };
    // a resumed run continues under the checkpoint's configuration
    let mut echoed = cfg.clone();
    echoed.model = trainer.model().config.clone();
    echoed.train = trainer.config().clone();
    echo_config(out, &echoed)?;
    let rows = trainer.run(Some(out), None)?;
    match rows.last() {
        Some(r) => println!("{}", serde_json::to_string(r)?),
        None => println!("nothing to do: training already complete"),
    }
    Ok(())
}

fn finetune(cfg: &RunConfig, digest: &str) -> Result<()> {
    let enc = Encoder::from_checkpoint(&load_checkpoint(cfg.checkpoint.as_ref().expect("checked"))?)?;
    let all = read_avt(cfg.data.train.as_ref().expect("checked"))?;
    let (train, test) = match &cfg.data.eval {
        Some(p) => (all, read_avt(p)?),
        None => split_holdout(&all, cfg.data.holdout, cfg.finetune.seed)?,
    };
    let r = finetune_classify(&train, &test, &enc, &cfg.finetune)?;
    let report = EvalReport {
        task: "finetune".into(),
        config_digest: digest.into(),
        metrics: r.metrics(),
    };
    emit_report(cfg, &report, "finetune.json")
}

fn eval(cfg: &RunConfig, digest: &str) -> Result<()> {
    let enc = Encoder::from_checkpoint(&load_checkpoint(cfg.checkpoint.as_ref().expect("checked"))?)?;
    let path = cfg.data.eval.as_ref().or(cfg.data.train.as_ref()).expect("checked");
    let samples = read_avt(path)?;
    let opts = &cfg.eval;
    let mut metrics = std::collections::BTreeMap::new();
    let needs_corpus = opts
        .tasks
        .iter()
        .any(|t| matches!(t, EvalTask::Retrieval | EvalTask::Localization));
    let corpus = if needs_corpus {
        Some(encode_corpus(&samples, &enc, opts.mask_ratio, opts.inpaint.seed)?)
    } else {
        None
    };
    for task in &opts.tasks {
        match task {
            EvalTask::Retrieval => {
                let r = retrieval_at_k(corpus.as_ref().expect("encoded"), &opts.ks)?;
                metrics.extend(r.metrics());
            }
            EvalTask::Inpaint => {
                let r = inpaint_eval(&samples, &enc, &opts.inpaint)?;
                metrics.insert("inpaint_loss_a".into(), r.loss_a);
                metrics.insert("inpaint_loss_v".into(), r.loss_v);
            }
            EvalTask::Localization => {
                let s = localization_score(corpus.as_ref().expect("encoded"))?;
                metrics.insert("localization_avg_cos".into(), s);
            }
        }
    }
    let names: Vec<String> = opts
        .tasks
        .iter()
        .map(|t| serde_json::to_value(t).map(|v| v.as_str().unwrap_or_default().to_string()))
        .collect::<std::result::Result<_, _>>()?;
    let report = EvalReport {
        task: names.join("+"),
        config_digest: digest.into(),
        metrics,
    };
    emit_report(cfg, &report, "eval.json")
}

/// Runs the gradient check; `Ok(false)` when it ran but failed tolerance.
fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let gc = &cfg.gradcheck;
    let model = KdcModel::new(cfg.model.clone())?;
    let samples: Vec<AVSample> = synth_dataset(
        gc.batch,
        cfg.gen_data.classes,
        cfg.gen_data.noise_sigma,
        &cfg.model.geometry,
        gc.seed,
    )?;
    let batch = prepare_all(&samples, &cfg.model)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mc = &cfg.model;
    let masks = draw_masks(mc, mc.mask_policy, mc.n_streams, gc.seed, 1, 1, &idx)?;
    let mut params = init_model(mc, gc.seed)?;
    cfg.train.objective.weights.install(&mut params)?;
    let spec = cfg.train.objective;
    let f = |g: &mut crate::numerics::Graph, p: &crate::numerics::ParamTree| {
        Ok(build_objective(g, p, &model, &batch, &masks, &spec)?.total)
    };
    let opts = GradCheckOptions {
        rel_tol: gc.rel_tol,
        h: gc.h,
        coords: match gc.per_param {
            Some(per_param) => CoordSelection::Sample { per_param, seed: gc.seed },
            None => CoordSelection::All,
        },
        ..GradCheckOptions::default()
    };
    let report = grad_check(&f, &params, opts)?;
    let checked: usize = report.params.iter().map(|p| p.coords_checked).sum();
    println!(
        "checked {checked} coordinates in {} tensors; max relative error {:.3e} ({})",
        report.params.len(),
        report.max_rel_error,
        report.worst_param.as_deref().unwrap_or("-")
    );
    println!("{} at rel_tol {:e}", if report.passed { "PASS" } else { "FAIL" }, report.rel_tol);
    Ok(report.passed)
}

/// Parses `argv` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let (cmd, common) = match cli.command {
        Command::GenData(c) => (Cmd::GenData, c),
        Command::Pretrain(c) => (Cmd::Pretrain, c),
        Command::Finetune(c) => (Cmd::Finetune, c),
        Command::Eval(c) => (Cmd::Eval, c),
        Command::Gradcheck(c) => (Cmd::Gradcheck, c),
    };
    let prepared = (|| -> Result<(RunConfig, String)> {
        configure_threads()?;
        let text = match &common.config {
            Some(p) => Some(fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?),
            None => None,
        };
        let cfg = resolve_config(common.preset.as_deref(), text.as_deref(), &common.overrides(cmd)?)?;
        check_required(cmd, &cfg)?;
        let digest = config_digest(&cfg)?;
        Ok((cfg, digest))
    })();
    let (cfg, digest) = match prepared {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    println!("config digest: {digest}");
    let outcome = match cmd {
        Cmd::GenData => gen_data(&cfg).map(|_| true),
        Cmd::Pretrain => pretrain(&cfg).map(|_| true),
        Cmd::Finetune => finetune(&cfg, &digest).map(|_| true),
        Cmd::Eval => eval(&cfg, &digest).map(|_| true),
        Cmd::Gradcheck => gradcheck(&cfg),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_RUNTIME,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
