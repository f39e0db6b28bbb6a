//! Projection encoders, the text featurizer, Adam with a one-cycle schedule,
//! the epoch loop and checkpoints.

mod checkpoint;
mod encoder;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, RngState, CHECKPOINT_MAGIC, FORMAT_VERSION,
};
pub use encoder::{
    embed_records, embed_texts, encode_batch, featurize_text, init_params, label_layout, Embeddings, EncodedBatch,
    ParamSet, ParamVars,
};

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{make_batches, Batch, DataError, Dataset, Split};
use crate::evaluator::{self, EvalError, Task};
use crate::losses::{total_loss, LossBreakdown, LossConfig, LossError};
use crate::numerics::{Graph, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at epoch {epoch} step {step}: {breakdown}")]
    NonFiniteLoss {
        epoch: u64,
        step: u64,
        breakdown: LossBreakdown,
    },
    #[error("feature width mismatch: {what} has width {found}, encoder expects {expected}")]
    WidthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("checkpoint does not match this run: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: u64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr_min")]
    pub lr_min: f64,
    #[serde(default = "defaults::lr_max")]
    pub lr_max: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::adam_eps")]
    pub adam_eps: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::d_in")]
    pub d_in: usize,
    #[serde(default = "defaults::d")]
    pub d: usize,
    /// Width of an optional hidden ReLU layer in every encoder.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Standard deviation of initial weights, times `1/sqrt(fan_in)`.
    #[serde(default = "defaults::init_scale")]
    pub init_scale: f64,
    pub loss: LossConfig,
}

mod defaults {
    pub fn epochs() -> u64 {
        50
    }
    pub fn batch_size() -> usize {
        128
    }
    pub fn lr_min() -> f64 {
        1e-6
    }
    pub fn lr_max() -> f64 {
        5e-5
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.98
    }
    pub fn adam_eps() -> f64 {
        1e-8
    }
    pub fn weight_decay() -> f64 {
        1e-4
    }
    pub fn warmup_fraction() -> f64 {
        0.3
    }
    pub fn d_in() -> usize {
        32
    }
    pub fn d() -> usize {
        64
    }
    pub fn init_scale() -> f64 {
        1.0
    }
}

impl TrainConfig {
    pub fn new(loss: LossConfig) -> Self {
        TrainConfig {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            lr_min: defaults::lr_min(),
            lr_max: defaults::lr_max(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            adam_eps: defaults::adam_eps(),
            weight_decay: defaults::weight_decay(),
            warmup_fraction: defaults::warmup_fraction(),
            seed: 0,
            d_in: defaults::d_in(),
            d: defaults::d(),
            hidden: None,
            init_scale: defaults::init_scale(),
            loss,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad("need 0 < lr_min <= lr_max");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must be in (0, 1)");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.adam_eps > 0.0 && self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("adam_eps must be > 0 and weight_decay >= 0");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.d_in == 0 || self.d == 0 || self.hidden == Some(0) {
            return bad("layer widths must be positive");
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return bad("init_scale must be positive");
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// One-cycle learning rate: cosine warmup from `lr_min` to `lr_max` over the
/// first `floor(warmup_fraction * total_steps)` steps, then cosine decay back
/// to `lr_min` at the final step.
pub fn one_cycle_lr(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let (lo, hi) = (cfg.lr_min, cfg.lr_max);
    if total_steps <= 1 {
        return lo;
    }
    let step = step.min(total_steps - 1);
    let peak = (cfg.warmup_fraction * total_steps as f64).floor() as u64;
    let cosine = |p: f64| lo + (hi - lo) * 0.5 * (1.0 - (std::f64::consts::PI * p).cos());
    if step < peak {
        cosine(step as f64 / peak as f64)
    } else {
        let span = (total_steps - 1 - peak).max(1);
        cosine(1.0 - (step - peak) as f64 / span as f64)
    }
}

/// Adam moments for every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
    /// Number of updates applied so far.
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamSet) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// Adam with decoupled weight decay on weight matrices:
/// `theta <- theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, lr: f64, cfg: &TrainConfig) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (k, (name, p)) in params.iter_mut().enumerate() {
        let decay = if ParamSet::is_weight(name) {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        let g = grads.get_index(k);
        let m = state.m.get_index_mut(k).data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = state.v.get_index_mut(k).data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (state.m.get_index(k).data(), state.v.get_index(k).data());
        for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let step = (mi / bc1) / ((vi / bc2).sqrt() + cfg.adam_eps);
            *pi = *pi * decay - lr * step;
        }
    }
}

/// Loss and gradients of the configured objective on one batch.
pub fn loss_and_grad(
    dataset: &Dataset,
    batch: &Batch,
    params: &ParamSet,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ParamSet), TrainError> {
    let mut g = Graph::new();
    let vars = params.attach(&mut g);
    let encoded = encode_batch(&mut g, &vars, dataset, batch, cfg)?;
    let nodes = total_loss(&mut g, &encoded.embeddings, vars.log_temperature(), &cfg.loss)?;
    let breakdown = nodes.breakdown(&g);
    let grads = g.backward(nodes.total).expect("total loss is a scalar");
    Ok((breakdown, vars.gradients(&grads, params)))
}

/// Forward, backward and one Adam step at learning rate `lr`.
pub fn train_step(
    dataset: &Dataset,
    batch: &Batch,
    params: &mut ParamSet,
    opt: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<LossBreakdown, TrainError> {
    let (breakdown, grads) = loss_and_grad(dataset, batch, params, cfg)?;
    if !breakdown.is_finite() || !grads.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch: 0,
            step: opt.t,
            breakdown,
        });
    }
    adam_update(params, &grads, opt, lr, cfg);
    Ok(breakdown)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub temperature: f64,
    pub loss: LossBreakdown,
}

pub const STEP_LOG_HEADER: &str = "step,epoch,lr,temperature,total,contrastive,entailment,sel_intra,sel_inter";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v}"));
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.temperature,
            self.loss.total,
            opt(self.loss.contrastive),
            opt(self.loss.entailment),
            opt(self.loss.sel_intra),
            opt(self.loss.sel_inter)
        )
    }
}

/// Validation summary after an epoch: species-level micro top-1 of
/// validation queries against train_seen keys, per task.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_loss: f64,
    pub val_species_top1: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of initializing.
    pub resume: Option<Checkpoint>,
    /// Stop after this many completed epochs (for interrupting a run).
    pub stop_after_epoch: Option<u64>,
    /// Skip the per-epoch validation retrieval.
    pub skip_validation: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
}

impl TrainOutcome {
    pub fn write_step_log(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "{STEP_LOG_HEADER}").map_err(io)?;
        for s in &self.steps {
            writeln!(f, "{}", s.csv_row()).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Initial checkpoint for `cfg`: parameters drawn from a generator seeded
/// with `cfg.seed`, zero moments, epoch 0.
pub fn initial_checkpoint(cfg: &TrainConfig) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = init_params(cfg, &mut rng);
    let opt = AdamState::zeros_like(&params);
    Ok(Checkpoint {
        config: cfg.clone(),
        epoch: 0,
        step: 0,
        rng: RngState::capture(cfg.seed, &rng),
        params,
        adam_m: opt.m,
        adam_v: opt.v,
    })
}

/// Number of optimizer steps per epoch over `train_size` records.
pub fn steps_per_epoch(train_size: usize, batch_size: usize) -> u64 {
    train_size.div_ceil(batch_size) as u64
}

/// Runs `cfg.epochs` epochs over the train_seen split.
///
/// Batches for epoch `e` are a pure function of `(cfg.seed, e)`, so a run
/// resumed from a checkpoint follows the same trajectory as an
/// uninterrupted one.
pub fn train(dataset: &Dataset, cfg: &TrainConfig, options: TrainOptions) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let (wi, wd) = dataset.feature_widths();
    for (what, found) in [("img_feat", wi), ("dna_feat", wd)] {
        if found != cfg.d_in {
            return Err(TrainError::WidthMismatch {
                what,
                expected: cfg.d_in,
                found,
            });
        }
    }
    let train_idx = dataset.require(Split::TrainSeen)?;
    let per_epoch = steps_per_epoch(train_idx.len(), cfg.batch_size);
    let total_steps = per_epoch * cfg.epochs;

    let mut ckpt = match options.resume {
        Some(c) => {
            if c.config != *cfg {
                return Err(TrainError::ResumeMismatch("config differs".into()));
            }
            if c.step != c.epoch * per_epoch {
                return Err(TrainError::ResumeMismatch(format!(
                    "step {} is not the end of epoch {}",
                    c.step, c.epoch
                )));
            }
            c
        }
        None => initial_checkpoint(cfg)?,
    };
    let mut opt = AdamState {
        m: ckpt.adam_m.clone(),
        v: ckpt.adam_v.clone(),
        t: ckpt.step,
    };
    let last_epoch = options.stop_after_epoch.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    for epoch in ckpt.epoch..last_epoch {
        let batches = make_batches(dataset, &train_idx, cfg.batch_size, cfg.seed, epoch)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            let lr = one_cycle_lr(ckpt.step, total_steps, cfg);
            let loss = train_step(dataset, batch, &mut ckpt.params, &mut opt, lr, cfg).map_err(|e| match e {
                TrainError::NonFiniteLoss { breakdown, .. } => TrainError::NonFiniteLoss {
                    epoch,
                    step: ckpt.step,
                    breakdown,
                },
                other => other,
            })?;
            loss_sum += loss.total;
            steps.push(StepLog {
                step: ckpt.step,
                epoch,
                lr,
                temperature: ckpt.params.get("log_temperature").expect("temperature").item().exp(),
                loss,
            });
            ckpt.step += 1;
        }
        ckpt.epoch = epoch + 1;
        let val_species_top1 = if options.skip_validation {
            None
        } else {
            validation_summary(dataset, &ckpt.params, cfg)?
        };
        epochs.push(EpochSummary {
            epoch,
            mean_loss: loss_sum / batches.len() as f64,
            val_species_top1,
        });
    }
    ckpt.adam_m = opt.m;
    ckpt.adam_v = opt.v;
    Ok(TrainOutcome {
        checkpoint: ckpt,
        steps,
        epochs,
    })
}

fn validation_summary(dataset: &Dataset, params: &ParamSet, cfg: &TrainConfig) -> Result<Option<[f64; 3]>, TrainError> {
    let queries = dataset.indices_in(Split::Val);
    let keys = dataset.indices_in(Split::TrainSeen);
    if queries.is_empty() || keys.is_empty() {
        return Ok(None);
    }
    let q = embed_records(params, dataset, &queries, cfg)?;
    let k = embed_records(params, dataset, &keys, cfg)?;
    let species = |idx: &[usize]| -> Vec<Option<usize>> {
        idx.iter()
            .map(|&i| dataset.index.class_of(&dataset.records[i], 3))
            .collect()
    };
    let (qs, ks) = (species(&queries), species(&keys));
    let mut out = [0.0; 3];
    for (slot, task) in out.iter_mut().zip(Task::ALL) {
        let pred = evaluator::retrieve_top1(q.modality(task.query()), k.modality(task.key()), &cfg.loss)?;
        let (hit, total) = pred
            .iter()
            .zip(&qs)
            .filter_map(|(&p, t)| t.map(|t| (ks[p] == Some(t)) as usize))
            .fold((0, 0), |(h, n), x| (h + x, n + 1));
        *slot = if total == 0 { 0.0 } else { hit as f64 / total as f64 };
    }
    Ok(Some(out))
}

/// Reads a training config from JSON.
pub fn load_config(path: &Path) -> Result<TrainConfig, TrainError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let cfg: TrainConfig =
        serde_json::from_str(&text).map_err(|e| TrainError::InvalidConfig(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `n x d` tensor stacking the given rows.
pub(crate) fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::new(n, width, data)
}
