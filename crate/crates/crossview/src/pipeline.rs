//! Two-stage training orchestration: regular metric training first,
//! then attention-guided token cropping on the aerial stream with the
//! saved computation optionally reinvested in higher resolution.
//!
//! Every run echoes its fully-resolved configuration before the first
//! step, logs one CSV row per epoch, and writes a self-contained
//! checkpoint (model arrays, optimizer state, crop masks).

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::crop::{resize_attention, scaled_grid, select_tokens, CropError, CropPolicy};
use crate::data::{DataError, DatasetIndex, Image};
use crate::eval::{
    hit_rate, meter_curve, rank_references, recall_at_k, recall_at_one_percent, EvalError,
};
use crate::loss::{make_batches, triplet_loss, LossError, PairBatch, TripletLossConfig};
use crate::optim::{
    asam_step, cosine_lr, AdamWState, AsamConfig, CosineSchedule, LossAndGrads, OptimError,
    ParamSet,
};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::vit::{AttentionMap, PosEmbedKind, ViTConfig, ViTEncoder, VitError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Crop(#[from] CropError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("attention file missing for record {0}")]
    MissingAttention(String),
    #[error("split {0:?} selects no records")]
    EmptySplit(String),
}

/// Full run configuration. Every field has a default; a config file
/// overrides fields by `key = value` lines and unknown keys are
/// rejected.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data_index: PathBuf,
    pub patch_size: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub embed_out: usize,
    pub pos_embed: PosEmbedKind,
    pub alpha: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub rho: f64,
    pub eta: f64,
    pub asam: bool,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub beta: f64,
    pub gamma: f64,
    pub freeze_street_stage2: bool,
    pub schedule_total: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            data_index: PathBuf::from("data/index.csv"),
            patch_size: 16,
            model_dim: 384,
            layers: 12,
            heads: 6,
            mlp_ratio: 4,
            embed_out: 1000,
            pos_embed: PosEmbedKind::Learnable,
            alpha: 10.0,
            lr: 1e-4,
            lr_min: 0.0,
            weight_decay: 0.03,
            rho: 2.5,
            eta: 0.01,
            asam: true,
            batch_size: 16,
            epochs_stage1: 100,
            epochs_stage2: 100,
            beta: 0.64,
            gamma: 1.0,
            freeze_street_stage2: false,
            schedule_total: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {path:?}: {e}")))?;
        Self::from_str_cfg(&text)
    }

    pub fn from_str_cfg(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: not key = value", ln + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| PipelineError::Config(format!("line {}: {e}", ln + 1)))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?}"))
        }
        match key {
            "seed" => self.seed = num(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "data_index" => self.data_index = PathBuf::from(value),
            "patch_size" => self.patch_size = num(value)?,
            "model_dim" => self.model_dim = num(value)?,
            "layers" => self.layers = num(value)?,
            "heads" => self.heads = num(value)?,
            "mlp_ratio" => self.mlp_ratio = num(value)?,
            "embed_out" => self.embed_out = num(value)?,
            "pos_embed" => {
                self.pos_embed = match value {
                    "learnable" => PosEmbedKind::Learnable,
                    "fixed_sincos_2d" => PosEmbedKind::FixedSincos2d,
                    other => return Err(format!("unknown pos_embed {other:?}")),
                }
            }
            "alpha" => self.alpha = num(value)?,
            "lr" => self.lr = num(value)?,
            "lr_min" => self.lr_min = num(value)?,
            "weight_decay" => self.weight_decay = num(value)?,
            "rho" => self.rho = num(value)?,
            "eta" => self.eta = num(value)?,
            "asam" => self.asam = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "epochs_stage1" => self.epochs_stage1 = num(value)?,
            "epochs_stage2" => self.epochs_stage2 = num(value)?,
            "beta" => self.beta = num(value)?,
            "gamma" => self.gamma = num(value)?,
            "freeze_street_stage2" => self.freeze_street_stage2 = num(value)?,
            "schedule_total" => self.schedule_total = Some(num(value)?),
            other => return Err(format!("unknown key {other:?}")),
        }
        Ok(())
    }

    /// Fully-resolved key = value listing, written before any training.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "data_index = {}", self.data_index.display());
        let _ = writeln!(s, "patch_size = {}", self.patch_size);
        let _ = writeln!(s, "model_dim = {}", self.model_dim);
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "embed_out = {}", self.embed_out);
        let _ = writeln!(
            s,
            "pos_embed = {}",
            match self.pos_embed {
                PosEmbedKind::Learnable => "learnable",
                PosEmbedKind::FixedSincos2d => "fixed_sincos_2d",
            }
        );
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lr_min = {}", self.lr_min);
        let _ = writeln!(s, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "eta = {}", self.eta);
        let _ = writeln!(s, "asam = {}", self.asam);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs_stage1 = {}", self.epochs_stage1);
        let _ = writeln!(s, "epochs_stage2 = {}", self.epochs_stage2);
        let _ = writeln!(s, "beta = {}", self.beta);
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "freeze_street_stage2 = {}", self.freeze_street_stage2);
        if let Some(t) = self.schedule_total {
            let _ = writeln!(s, "schedule_total = {t}");
        }
        s
    }

    pub fn vit_config(&self) -> ViTConfig {
        ViTConfig {
            patch_size: self.patch_size,
            model_dim: self.model_dim,
            layers: self.layers,
            heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            embed_out: self.embed_out,
            pos_embed: self.pos_embed,
        }
    }
}

/// The two independent encoders. Nothing is shared between streams.
pub struct TwoStreamModel<S: crate::tensor::Scalar> {
    pub street: ViTEncoder<S>,
    pub aerial: ViTEncoder<S>,
}

impl<S: crate::tensor::Scalar> TwoStreamModel<S> {
    pub fn new(
        cfg: &RunConfig,
        street_grid: (usize, usize),
        aerial_grid: (usize, usize),
    ) -> Result<Self, PipelineError> {
        let mut rng_s = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(2).wrapping_add(1));
        let mut rng_a = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(2).wrapping_add(2));
        Ok(Self {
            street: ViTEncoder::new(cfg.vit_config(), street_grid, 3, &mut rng_s)?,
            aerial: ViTEncoder::new(cfg.vit_config(), aerial_grid, 3, &mut rng_a)?,
        })
    }
}

impl TwoStreamModel<f32> {
    pub fn store(&self, ck: &mut Checkpoint) -> Result<(), CheckpointError> {
        self.street.store(ck, "street")?;
        self.aerial.store(ck, "aerial")
    }

    pub fn load(cfg: &RunConfig, ck: &Checkpoint) -> Result<Self, PipelineError> {
        let grid_of = |name: &str| -> Result<(usize, usize), PipelineError> {
            let g = ck.require(name)?;
            Ok((g.data()[0] as usize, g.data()[1] as usize))
        };
        let mut model = Self::new(cfg, grid_of("street/grid")?, grid_of("aerial/grid")?)?;
        model.street.restore(ck, "street")?;
        model.aerial.restore(ck, "aerial")?;
        Ok(model)
    }
}

impl<S: crate::tensor::Scalar> ParamSet<S> for TwoStreamModel<S> {
    fn params(&self) -> Vec<&Tensor<S>> {
        let mut p = self.street.params();
        p.extend(self.aerial.params());
        p
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut p = self.street.params_mut();
        p.extend(self.aerial.params_mut());
        p
    }
    fn perturb_flags(&self) -> Vec<bool> {
        let mut f = self.street.param_perturb_flags();
        f.extend(self.aerial.param_perturb_flags());
        f
    }
}

/// View of the model that exposes only the aerial stream's parameters
/// to the optimizer (street stream frozen).
pub struct AerialOnly<'a, S: crate::tensor::Scalar>(pub &'a mut TwoStreamModel<S>);

impl<S: crate::tensor::Scalar> ParamSet<S> for AerialOnly<'_, S> {
    fn params(&self) -> Vec<&Tensor<S>> {
        self.0.aerial.params()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.0.aerial.params_mut()
    }
    fn perturb_flags(&self) -> Vec<bool> {
        self.0.aerial.param_perturb_flags()
    }
}

pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub first_loss: f64,
    pub final_train_r1: f64,
    pub steps: u64,
}

fn opt_err(e: impl std::fmt::Display) -> OptimError {
    OptimError::Model(e.to_string())
}

/// Load every image of the index into memory up front.
fn load_images(index: &DatasetIndex) -> Result<(Vec<Image>, Vec<Image>), PipelineError> {
    let mut street = Vec::with_capacity(index.len());
    let mut aerial = Vec::with_capacity(index.len());
    for i in 0..index.len() {
        street.push(index.street_image(i)?);
        aerial.push(index.aerial_image(i)?);
    }
    Ok((street, aerial))
}

/// Forward a set of records and stack the two embedding matrices.
fn embed_records(
    model: &TwoStreamModel<f32>,
    street_imgs: &[Image],
    aerial_imgs: &[Image],
    indices: &[usize],
    masks: Option<&[Vec<usize>]>,
) -> Result<(Tensor<f32>, Tensor<f32>), PipelineError> {
    let e = model.street.cfg.embed_out;
    let mut sdata = Vec::with_capacity(indices.len() * e);
    let mut adata = Vec::with_capacity(indices.len() * e);
    for &i in indices {
        let mut tape = Tape::new();
        let bs = model.street.bind(&mut tape, false)?;
        let ba = model.aerial.bind(&mut tape, false)?;
        let (es, _) = model
            .street
            .forward_image(&mut tape, &bs, &street_imgs[i], None, false)?;
        let keep = masks.map(|m| m[i].as_slice());
        let (ea, _) = model
            .aerial
            .forward_image(&mut tape, &ba, &aerial_imgs[i], keep, false)?;
        sdata.extend_from_slice(tape.value(es).data());
        adata.extend_from_slice(tape.value(ea).data());
    }
    Ok((
        Tensor::new(vec![indices.len(), e], sdata)?,
        Tensor::new(vec![indices.len(), e], adata)?,
    ))
}

fn train_r1(
    model: &TwoStreamModel<f32>,
    street_imgs: &[Image],
    aerial_imgs: &[Image],
    masks: Option<&[Vec<usize>]>,
) -> Result<f64, PipelineError> {
    let indices: Vec<usize> = (0..street_imgs.len()).collect();
    let (q, r) = embed_records(model, street_imgs, aerial_imgs, &indices, masks)?;
    let result = rank_references(&q, &r, 1)?;
    Ok(recall_at_k(&result, 1))
}

/// One gradient evaluation: forward every pair in the batch on a fresh
/// tape, triplet loss, backward, gradients in `params()` order.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    model: &TwoStreamModel<f32>,
    street_imgs: &[Image],
    aerial_imgs: &[Image],
    batch: &[usize],
    masks: Option<&[Vec<usize>]>,
    alpha: f64,
    train_street: bool,
) -> LossAndGrads<f32> {
    let mut tape = Tape::new();
    let bs = model.street.bind(&mut tape, train_street).map_err(opt_err)?;
    let ba = model.aerial.bind(&mut tape, true).map_err(opt_err)?;
    let mut street_embs = Vec::with_capacity(batch.len());
    let mut aerial_embs = Vec::with_capacity(batch.len());
    for &i in batch {
        let (es, _) = model
            .street
            .forward_image(&mut tape, &bs, &street_imgs[i], None, false)
            .map_err(opt_err)?;
        let keep = masks.map(|m| m[i].as_slice());
        let (ea, _) = model
            .aerial
            .forward_image(&mut tape, &ba, &aerial_imgs[i], keep, false)
            .map_err(opt_err)?;
        street_embs.push(es);
        aerial_embs.push(ea);
    }
    let s = tape.concat(&street_embs, 0).map_err(opt_err)?;
    let a = tape.concat(&aerial_embs, 0).map_err(opt_err)?;
    let pair = PairBatch::new(&tape, s, a, batch.to_vec()).map_err(opt_err)?;
    let out = triplet_loss(&mut tape, &pair, &TripletLossConfig { alpha }).map_err(opt_err)?;
    let loss = tape.value(out.loss).data()[0];
    tape.backward(out.loss).map_err(opt_err)?;

    let mut vars = Vec::new();
    if train_street {
        vars.extend(bs.vars());
    }
    vars.extend(ba.vars());
    let grads = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
        })
        .collect();
    Ok((loss as f64 as f32, grads))
}

struct StageSetup<'a> {
    tag: &'a str,
    epochs: usize,
    masks: Option<Vec<Vec<usize>>>,
    freeze_street: bool,
}

fn run_training(
    cfg: &RunConfig,
    model: &mut TwoStreamModel<f32>,
    index: &DatasetIndex,
    street_imgs: &[Image],
    aerial_imgs: &[Image],
    stage: StageSetup<'_>,
) -> Result<TrainOutput, PipelineError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join(format!("config_{}.cfg", stage.tag)),
        cfg.echo(),
    )?;

    let steps_per_epoch = (index.len() / cfg.batch_size) as u64;
    let total_steps = cfg
        .schedule_total
        .unwrap_or((stage.epochs as u64) * steps_per_epoch.max(1));
    let sched = CosineSchedule {
        total_steps,
        lr0: cfg.lr,
        lr_min: cfg.lr_min,
    };
    let asam_cfg = AsamConfig {
        rho: if cfg.asam { cfg.rho } else { 0.0 },
        eta: cfg.eta,
    };
    let mut adamw = AdamWState::<f32>::new(cfg.weight_decay);

    let log_path = cfg.out_dir.join(format!("train_log_{}.csv", stage.tag));
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    writeln!(log, "epoch,mean_loss,train_r_at_1")?;

    let mut t: u64 = 0;
    let mut first_loss = f64::NAN;
    let mut final_r1 = 0.0;
    let masks = stage.masks.as_deref();
    for epoch in 0..stage.epochs {
        let batches = make_batches(index, cfg.batch_size, cfg.seed.wrapping_add(1009 * epoch as u64))?;
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch in &batches {
            let lr = cosine_lr(t.min(total_steps), &sched)? as f32;
            let loss_fn = |m: &TwoStreamModel<f32>| -> LossAndGrads<f32> {
                batch_loss(
                    m,
                    street_imgs,
                    aerial_imgs,
                    batch,
                    masks,
                    cfg.alpha,
                    !stage.freeze_street,
                )
            };
            let loss = if cfg.asam {
                if stage.freeze_street {
                    let mut view = AerialOnly(model);
                    let fwd = |v: &AerialOnly<f32>| loss_fn(v.0);
                    asam_step(&mut view, fwd, &asam_cfg, &mut adamw, lr)?
                } else {
                    asam_step(model, loss_fn, &asam_cfg, &mut adamw, lr)?
                }
            } else {
                // plain AdamW: single pass
                let (loss, grads) = loss_fn(model)?;
                if stage.freeze_street {
                    let mut ps = model.aerial.params_mut();
                    adamw.step(&mut ps, &grads, lr)?;
                } else {
                    let mut ps = model.params_mut();
                    adamw.step(&mut ps, &grads, lr)?;
                }
                loss
            };
            if first_loss.is_nan() {
                first_loss = loss as f64;
            }
            epoch_loss += loss as f64;
            n_batches += 1;
            t += 1;
        }
        let mean_loss = epoch_loss / n_batches.max(1) as f64;
        final_r1 = train_r1(model, street_imgs, aerial_imgs, masks)?;
        writeln!(log, "{epoch},{mean_loss},{final_r1}")?;
        log.flush()?;
    }

    let ckpt_path = cfg.out_dir.join(format!("{}.ckpt", stage.tag));
    let mut ck = Checkpoint::new();
    model.store(&mut ck)?;
    adamw.store(&mut ck)?;
    ck.insert(
        "meta/aerial_side_px",
        Tensor::new(vec![1], vec![aerial_imgs[0].w as f32]).expect("side"),
    )?;
    if let Some(masks) = &stage.masks {
        for (i, kept) in masks.iter().enumerate() {
            let data: Vec<f32> = kept.iter().map(|&k| k as f32).collect();
            ck.insert(
                &format!("mask/{}", index.records[i].id),
                Tensor::new(vec![data.len().max(1)], if data.is_empty() { vec![0.0] } else { data })
                    .expect("mask"),
            )?;
        }
    }
    ck.save(&ckpt_path)?;

    Ok(TrainOutput {
        checkpoint: ckpt_path,
        log: log_path,
        first_loss,
        final_train_r1: final_r1,
        steps: t,
    })
}

/// Stage 1: regular two-stream training with the soft-margin triplet
/// loss under ASAM. Deterministic under the config seed.
pub fn train_stage1(cfg: &RunConfig) -> Result<TrainOutput, PipelineError> {
    let index = DatasetIndex::load(&cfg.data_index)?;
    let (street_imgs, aerial_imgs) = load_images(&index)?;
    let p = cfg.patch_size;
    let sg = (street_imgs[0].h / p, street_imgs[0].w / p);
    let ag = (aerial_imgs[0].h / p, aerial_imgs[0].w / p);
    let mut model = TwoStreamModel::<f32>::new(cfg, sg, ag)?;
    run_training(
        cfg,
        &mut model,
        &index,
        &street_imgs,
        &aerial_imgs,
        StageSetup {
            tag: "stage1",
            epochs: cfg.epochs_stage1,
            masks: None,
            freeze_street: false,
        },
    )
}

/// Text attention-map file: `ATTN <rows> <cols>` header then the scores
/// row-major, whitespace-separated.
pub fn write_attn_file(map: &AttentionMap, path: &Path) -> Result<(), PipelineError> {
    let (rows, cols) = map.grid_shape;
    let mut s = format!("ATTN {rows} {cols}\n");
    for r in 0..rows {
        let line: Vec<String> = (0..cols)
            .map(|c| format!("{:.9e}", map.values[r * cols + c]))
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_attn_file(path: &Path) -> Result<AttentionMap, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|_| PipelineError::MissingAttention(path.display().to_string()))?;
    let mut tokens = text.split_whitespace();
    if tokens.next() != Some("ATTN") {
        return Err(PipelineError::Config(format!(
            "{}: not an attention file",
            path.display()
        )));
    }
    let mut dim = || -> Result<usize, PipelineError> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| PipelineError::Config(format!("{}: bad header", path.display())))
    };
    let rows = dim()?;
    let cols = dim()?;
    let values: Vec<f64> = tokens
        .map(|t| {
            t.parse()
                .map_err(|_| PipelineError::Config(format!("{}: bad value {t:?}", path.display())))
        })
        .collect::<Result<_, _>>()?;
    if values.len() != rows * cols {
        return Err(PipelineError::Config(format!(
            "{}: expected {} values, got {}",
            path.display(),
            rows * cols,
            values.len()
        )));
    }
    let sum: f64 = values.iter().sum();
    Ok(AttentionMap {
        grid_shape: (rows, cols),
        values,
        class_weight: (1.0 - sum).max(0.0),
    })
}

/// Export one attention file per reference image from a stage-1
/// checkpoint. Re-exporting from the same checkpoint is byte-identical.
pub fn export_attention(
    cfg: &RunConfig,
    ckpt: &Path,
    attn_dir: &Path,
) -> Result<usize, PipelineError> {
    let ck = Checkpoint::load(ckpt)?;
    let model = TwoStreamModel::load(cfg, &ck)?;
    let index = DatasetIndex::load(&cfg.data_index)?;
    std::fs::create_dir_all(attn_dir)?;
    for i in 0..index.len() {
        let img = index.aerial_image(i)?;
        let mut tape = Tape::new();
        let ba = model.aerial.bind(&mut tape, false)?;
        let (_, attn) = model
            .aerial
            .forward_image(&mut tape, &ba, &img, None, true)?;
        let map = attn.expect("attention requested");
        write_attn_file(&map, &attn_dir.join(format!("{}.attn", index.records[i].id)))?;
    }
    Ok(index.len())
}

/// Stage 2: continue from the stage-1 weights with the aerial stream
/// running on the β-selected token subset at the γ-scaled resolution.
/// Attention maps are read from files; they are never recomputed here.
pub fn train_stage2(
    cfg: &RunConfig,
    stage1_ckpt: &Path,
    attn_dir: &Path,
) -> Result<TrainOutput, PipelineError> {
    let policy = CropPolicy::new(cfg.beta, cfg.gamma, cfg.patch_size)?;
    let ck = Checkpoint::load(stage1_ckpt)?;
    let mut model = TwoStreamModel::load(cfg, &ck)?;
    let index = DatasetIndex::load(&cfg.data_index)?;
    let (street_imgs, mut aerial_imgs) = load_images(&index)?;

    let side_px = aerial_imgs[0].w;
    let (new_side, new_grid) = scaled_grid(side_px, policy.gamma, policy.patch_size)?;
    if new_grid != model.aerial.grid() {
        let pos = model.aerial.pos.interpolate(new_grid)?;
        model.aerial.set_position_embedding(pos);
    }
    if new_side != side_px {
        for img in aerial_imgs.iter_mut() {
            *img = img.resize_bilinear(new_side, new_side);
        }
    }

    let mut masks = Vec::with_capacity(index.len());
    for r in &index.records {
        let path = attn_dir.join(format!("{}.attn", r.id));
        if !path.exists() {
            return Err(PipelineError::MissingAttention(r.id.clone()));
        }
        let map = read_attn_file(&path)?;
        let map = resize_attention(&map, new_grid);
        let mask = select_tokens(&map, policy.beta)?;
        masks.push(mask.kept);
    }

    run_training(
        cfg,
        &mut model,
        &index,
        &street_imgs,
        &aerial_imgs,
        StageSetup {
            tag: "stage2",
            epochs: cfg.epochs_stage2,
            masks: Some(masks),
            freeze_street: cfg.freeze_street_stage2,
        },
    )
}

/// Metric table plus the meter curve, serializable as `metric,value`
/// CSV rows.
pub struct Metrics {
    pub rows: Vec<(String, f64)>,
}

pub const METER_THRESHOLDS: [f64; 6] = [1.0, 5.0, 10.0, 25.0, 50.0, 100.0];

impl Metrics {
    pub fn csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.rows {
            let _ = writeln!(s, "{k},{v:.4}");
        }
        s
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }
}

/// Embed every record of a split, rank aerials for each street query,
/// and report R@{1,5,10,1%}, hit rate and the meter curve.
pub fn evaluate(cfg: &RunConfig, ckpt: &Path, split: &str) -> Result<Metrics, PipelineError> {
    let ck = Checkpoint::load(ckpt)?;
    let model = TwoStreamModel::load(cfg, &ck)?;
    let full_index = DatasetIndex::load(&cfg.data_index)?;
    let chosen = full_index.split_indices(split);
    if chosen.is_empty() {
        return Err(PipelineError::EmptySplit(split.to_string()));
    }
    let sub_index = DatasetIndex::from_records(
        chosen
            .iter()
            .map(|&i| full_index.records[i].clone())
            .collect(),
    );

    let mut street_imgs = Vec::with_capacity(chosen.len());
    let mut aerial_imgs = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        street_imgs.push(full_index.street_image(i)?);
        aerial_imgs.push(full_index.aerial_image(i)?);
    }
    // a stage-2 checkpoint carries its crop masks and aerial resolution
    let masks: Option<Vec<Vec<usize>>> = if ck.get("mask/0000").is_some()
        || sub_index
            .records
            .first()
            .map(|r| ck.get(&format!("mask/{}", r.id)).is_some())
            .unwrap_or(false)
    {
        let side = ck.require("meta/aerial_side_px")?.data()[0] as usize;
        if side != aerial_imgs[0].w {
            for img in aerial_imgs.iter_mut() {
                *img = img.resize_bilinear(side, side);
            }
        }
        Some(
            sub_index
                .records
                .iter()
                .map(|r| -> Result<Vec<usize>, PipelineError> {
                    let m = ck.require(&format!("mask/{}", r.id))?;
                    Ok(m.data().iter().map(|&v| v as usize).collect())
                })
                .collect::<Result<_, _>>()?,
        )
    } else {
        None
    };

    let indices: Vec<usize> = (0..sub_index.len()).collect();
    let (q, r) = embed_records(
        &model,
        &street_imgs,
        &aerial_imgs,
        &indices,
        masks.as_deref(),
    )?;
    let result = rank_references(&q, &r, 10.max(one_pct(&sub_index)))?;
    let mut rows = vec![
        ("R@1".to_string(), recall_at_k(&result, 1)),
        ("R@5".to_string(), recall_at_k(&result, 5)),
        ("R@10".to_string(), recall_at_k(&result, 10)),
        ("R@1%".to_string(), recall_at_one_percent(&result)),
        ("hit_rate".to_string(), hit_rate(&result, &sub_index)?),
    ];
    for (tau, acc) in meter_curve(&result, &sub_index, &METER_THRESHOLDS)? {
        rows.push((format!("meter@{tau}"), acc));
    }
    Ok(Metrics { rows })
}

fn one_pct(index: &DatasetIndex) -> usize {
    crate::eval::one_percent_k(index.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{emit_dataset, DatasetModes, RenderParams, SceneSpec};

    fn toy_dataset(dir: &Path, seed: u64, n: usize) -> DatasetIndex {
        let _ = std::fs::remove_dir_all(dir);
        emit_dataset(
            &SceneSpec {
                seed,
                world_side_m: 200.0,
                landmarks: 24,
                radius_range_m: (2.0, 5.0),
                palette: 10,
                terrain_amp: 0.0,
            },
            n,
            &DatasetModes::default(),
            &RenderParams {
                pano_h: 8,
                pano_w: 16,
                aerial_px: 16,
                tile_extent_m: 30.0,
            },
            dir,
        )
        .unwrap()
    }

    fn toy_cfg(dir: &Path) -> RunConfig {
        RunConfig {
            seed: 5,
            out_dir: dir.join("run"),
            data_index: dir.join("index.csv"),
            patch_size: 8,
            model_dim: 8,
            layers: 1,
            heads: 2,
            mlp_ratio: 2,
            embed_out: 8,
            alpha: 10.0,
            lr: 1e-3,
            batch_size: 2,
            epochs_stage1: 1,
            epochs_stage2: 1,
            beta: 0.64,
            gamma: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn config_file_parsing_and_echo() {
        let cfg = RunConfig::from_str_cfg(
            "seed = 9\nalpha = 5.5 # comment\n# full comment line\npos_embed = fixed_sincos_2d\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.alpha, 5.5);
        assert_eq!(cfg.pos_embed, PosEmbedKind::FixedSincos2d);
        let echo = cfg.echo();
        assert!(echo.contains("seed = 9"));
        assert!(echo.contains("weight_decay = 0.03"));

        // echo parses back to the same config
        let again = RunConfig::from_str_cfg(&echo).unwrap();
        assert_eq!(again.alpha, 5.5);

        assert!(matches!(
            RunConfig::from_str_cfg("not_a_key = 3\n"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_str_cfg("just a line\n"),
            Err(PipelineError::Config(_))
        ));
    }

    #[test]
    fn smoke_stage1_trains_and_checkpoint_reloads() {
        let dir = std::env::temp_dir().join("crossview_pipe_smoke");
        toy_dataset(&dir, 60, 4);
        let cfg = toy_cfg(&dir);
        let out = train_stage1(&cfg).unwrap();
        assert!(out.checkpoint.exists());
        assert!(out.log.exists());
        assert!(out.first_loss.is_finite());
        assert!(cfg.out_dir.join("config_stage1.cfg").exists());

        let ck = Checkpoint::load(&out.checkpoint).unwrap();
        let model = TwoStreamModel::load(&cfg, &ck).unwrap();
        assert_eq!(model.street.grid(), (1, 2));
        assert_eq!(model.aerial.grid(), (2, 2));

        let metrics = evaluate(&cfg, &out.checkpoint, "train").unwrap();
        assert!(metrics.get("R@1").is_some());
        assert!(metrics.get("hit_rate").is_some());
        let csv = metrics.csv();
        assert_eq!(csv.lines().count(), 1 + 5 + METER_THRESHOLDS.len());
        assert!(matches!(
            evaluate(&cfg, &out.checkpoint, "val"),
            Err(PipelineError::EmptySplit(_))
        ));
    }

    #[test]
    fn stage1_rerun_is_bit_identical() {
        let dir = std::env::temp_dir().join("crossview_pipe_det");
        toy_dataset(&dir, 61, 4);
        let mut cfg = toy_cfg(&dir);
        cfg.out_dir = dir.join("run_a");
        let a = train_stage1(&cfg).unwrap();
        cfg.out_dir = dir.join("run_b");
        let b = train_stage1(&cfg).unwrap();
        let bytes_a = std::fs::read(&a.checkpoint).unwrap();
        let bytes_b = std::fs::read(&b.checkpoint).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn attention_export_then_stage2_runs() {
        let dir = std::env::temp_dir().join("crossview_pipe_stage2");
        toy_dataset(&dir, 62, 4);
        let cfg = toy_cfg(&dir);
        let s1 = train_stage1(&cfg).unwrap();
        let attn_dir = dir.join("attn");
        let count = export_attention(&cfg, &s1.checkpoint, &attn_dir).unwrap();
        assert_eq!(count, 4);

        // per-file sums stay within the softmax budget
        for i in 0..4 {
            let map = read_attn_file(&attn_dir.join(format!("{i:04}.attn"))).unwrap();
            let sum: f64 = map.values.iter().sum();
            assert!(sum <= 1.0 + 1e-4, "sum {sum}");
            assert_eq!(map.grid_shape, (2, 2));
        }

        // re-export is byte-identical
        let before = std::fs::read(attn_dir.join("0001.attn")).unwrap();
        export_attention(&cfg, &s1.checkpoint, &attn_dir).unwrap();
        assert_eq!(before, std::fs::read(attn_dir.join("0001.attn")).unwrap());

        let s2 = train_stage2(&cfg, &s1.checkpoint, &attn_dir).unwrap();
        assert!(s2.checkpoint.exists());
        let metrics = evaluate(&cfg, &s2.checkpoint, "train").unwrap();
        assert!(metrics.get("R@1").is_some());

        // missing attention file is a hard error
        std::fs::remove_file(attn_dir.join("0002.attn")).unwrap();
        assert!(matches!(
            train_stage2(&cfg, &s1.checkpoint, &attn_dir),
            Err(PipelineError::MissingAttention(_))
        ));
    }

    #[test]
    fn degenerate_policy_keeps_all_tokens() {
        let dir = std::env::temp_dir().join("crossview_pipe_degenerate");
        toy_dataset(&dir, 63, 4);
        let mut cfg = toy_cfg(&dir);
        cfg.beta = 1.0;
        cfg.gamma = 1.0;
        let s1 = train_stage1(&cfg).unwrap();
        let attn_dir = dir.join("attn");
        export_attention(&cfg, &s1.checkpoint, &attn_dir).unwrap();
        let s2 = train_stage2(&cfg, &s1.checkpoint, &attn_dir).unwrap();
        let ck = Checkpoint::load(&s2.checkpoint).unwrap();
        for i in 0..4 {
            let mask = ck.require(&format!("mask/{i:04}")).unwrap();
            assert_eq!(mask.numel(), 4, "all 2x2 patches kept");
        }
    }

    #[test]
    fn budget_violation_rejected_before_training() {
        let dir = std::env::temp_dir().join("crossview_pipe_budget");
        toy_dataset(&dir, 64, 4);
        let mut cfg = toy_cfg(&dir);
        cfg.beta = 1.0;
        cfg.gamma = 1.56;
        let err = train_stage2(&cfg, Path::new("/nonexistent"), Path::new("/nonexistent"));
        assert!(matches!(err, Err(PipelineError::Crop(_))));
    }
}
