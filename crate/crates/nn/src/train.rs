//! Stagewise pretraining on ground-truth intermediates and end-to-end
//! fine-tuning, with per-epoch checkpoints and exact resume.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use unshadow_core::dataset::{load_sample, prepare_sample, AugmentConfig, Manifest, PreparedSample, ShadowGtConfig, TrainingSample};
use unshadow_core::inpaint::InpaintOperator;
use unshadow_core::util::{config_hash, mix_seed, stream_rng, write_atomic};

use crate::adam::{Adam, AdamConfig};
use crate::batch::Batch;
use crate::checkpoint::{Checkpoint, TrainProgress};
use crate::error::{NnError, Result};
use crate::losses::{loss_intrinsic, loss_lighting, loss_output, loss_shadow_seg, LossWeights};
use crate::pipeline::{Net, PipelineState};
use crate::tensor::scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ss,
    Id,
    Sr,
    Li,
    #[serde(rename = "end2end")]
    EndToEnd,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Ss, Stage::Id, Stage::Sr, Stage::Li, Stage::EndToEnd];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ss => "ss",
            Stage::Id => "id",
            Stage::Sr => "sr",
            Stage::Li => "li",
            Stage::EndToEnd => "end2end",
        }
    }

    /// Networks whose parameters this stage updates.
    pub fn nets(self) -> &'static [Net] {
        match self {
            Stage::Ss => &[Net::Ss],
            Stage::Id => &[Net::Id],
            Stage::Sr => &[Net::Sr],
            Stage::Li => &[Net::Li],
            Stage::EndToEnd => &Net::ALL,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
            NnError::Config(format!("unknown stage {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub resolution: usize,
    /// Seed of batch order and augmentation.
    pub seed: u64,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Color augmentation of every drawn sample; `None` trains on the stored images.
    pub augment: Option<AugmentConfig>,
    pub shadow: ShadowGtConfig,
    /// Stops after this many optimizer steps in total, counting resumed ones.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Ss,
            epochs: 60,
            lr0: 1e-4,
            decay: 0.5,
            decay_every: 10,
            batch_size: 4,
            resolution: 64,
            seed: 0,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            augment: Some(AugmentConfig::default()),
            shadow: ShadowGtConfig::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    /// 512x512 images in batches of 16.
    pub fn paper(stage: Stage) -> Self {
        TrainConfig {
            stage,
            batch_size: 16,
            resolution: 512,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(NnError::Config(format!("lr0 must be finite and non-negative, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(NnError::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.decay_every == 0 {
            return Err(NnError::Config("decay_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be at least 1".into()));
        }
        let AdamConfig { beta1, beta2, eps } = self.adam;
        if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
            return Err(NnError::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
        }
        self.weights.validate()
    }

    /// Hash of everything that shapes the trajectory, so a run may be
    /// resumed with a different epoch count or step cap.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.max_steps = None;
        config_hash(&c)
    }
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi((epoch / cfg.decay_every) as i32)
}

/// Files a run writes, and where to continue from.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const DIVERGED_FILE: &str = "diverged.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
const LOG_HEADER: &str = "epoch,steps,lr,mean_loss";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub epochs_done: usize,
    pub steps_done: usize,
    /// Loss of every step taken in this call, before its update.
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

/// Loads every scene listed in a dataset directory's manifest, in order.
pub fn load_dataset(dir: &Path) -> Result<Vec<TrainingSample>> {
    let manifest = Manifest::load(dir)?;
    manifest
        .scenes
        .iter()
        .map(|e| load_sample(dir, &e.scene_id).map_err(Into::into))
        .collect()
}

fn check_dataset(cfg: &TrainConfig, samples: &[TrainingSample], state: &PipelineState) -> Result<()> {
    state.check_resolution(cfg.resolution, cfg.resolution)?;
    for s in samples {
        if s.t_hat.width() != cfg.resolution || s.t_hat.height() != cfg.resolution {
            return Err(NnError::Config(format!(
                "{} is {}x{}, training resolution is {}",
                s.scene_id,
                s.t_hat.width(),
                s.t_hat.height(),
                cfg.resolution
            )));
        }
        if s.m_r.is_empty() {
            return Err(NnError::Config(format!("{} has no receiver pixels", s.scene_id)));
        }
    }
    if matches!(cfg.stage, Stage::Li) && !samples.is_empty() && samples.iter().all(|s| s.m_o.is_empty()) {
        return Err(NnError::Config("lighting inpainting needs samples with a non-empty object mask".into()));
    }
    Ok(())
}

/// The stage loss on one batch. Stagewise losses feed ground-truth
/// intermediates downstream; end-to-end feeds predictions.
pub fn stage_loss(stage: Stage, state: &PipelineState, b: &Batch, w: &LossWeights, op: &dyn InpaintOperator) -> Result<Tensor> {
    match stage {
        Stage::Ss => {
            let s = state.shadow_segmentation(&b.log_i, &b.log_p, &b.m_r)?;
            loss_shadow_seg(&s, &b.s_hat, &b.m_r, w)
        }
        Stage::Id => {
            let (log_l, log_t) = state.intrinsic_decomposition(&b.log_i, &b.log_p, &b.s_hat, &b.m_r)?;
            loss_intrinsic(&log_l.exp()?, &log_t.exp()?, &b.l_hat, &b.t_hat, &b.i_n, &b.m_r, w)
        }
        Stage::Sr => {
            let log_lr = state.shadow_removal(
                &b.log_i,
                &b.log_t_hat,
                &b.log_l_hat,
                &b.log_p,
                &b.log_p_prime,
                &b.s_hat,
                &b.m_r,
                &b.m_o,
            )?;
            loss_lighting(&log_lr.exp()?, &b.l_hat_prime, &b.l_hat_prime, &b.m_r, &b.m_o, w)
        }
        Stage::Li => {
            let filled = &b.log_l_hat_prime_filled;
            let log_lo = state.lighting_inpaint(filled, filled, &b.log_p_prime, &b.m_o)?;
            loss_lighting(&b.l_hat_prime, &log_lo.exp()?, &b.l_hat_prime, &b.m_r, &b.m_o, w)
        }
        Stage::EndToEnd => {
            let f = state.forward(b, op)?;
            let seg = loss_shadow_seg(&f.s, &b.s_hat, &b.m_r, w)?;
            let intr = loss_intrinsic(&f.l, &f.t, &b.l_hat, &b.t_hat, &b.i_n, &b.m_r, w)?;
            let light = loss_lighting(&f.l_r_prime, &f.l_o_prime, &b.l_hat_prime, &b.m_r, &b.m_o, w)?;
            let out = loss_output(&b.i_hat_prime_n, &f.l_prime, &f.t_prime, &b.m_r_prime, w)?;
            Ok((((seg + intr)? + light)? + out)?)
        }
    }
}

fn prepare_all(samples: &[TrainingSample], shadow: &ShadowGtConfig) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| prepare_sample(s, None, shadow).map_err(Into::into))
        .collect()
}

/// Samples of one batch; with augmentation each draw has its own seed stream
/// keyed by `(epoch, index)`.
fn prepare_batch(
    cfg: &TrainConfig,
    samples: &[TrainingSample],
    cached: Option<&[PreparedSample]>,
    epoch: usize,
    indices: &[usize],
) -> Result<Vec<PreparedSample>> {
    if let Some(cached) = cached {
        return Ok(indices.iter().map(|&k| cached[k].clone()).collect());
    }
    let aug = cfg.augment.as_ref().expect("augmentation configured when nothing is cached");
    indices
        .par_iter()
        .map(|&k| {
            let mut rng = stream_rng(cfg.seed, mix_seed(epoch as u64 + 1, k as u64));
            prepare_sample(&samples[k], Some((&mut rng, aug)), &cfg.shadow).map_err(Into::into)
        })
        .collect()
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, mix_seed(0x5eed, epoch as u64)));
    order
}

/// Log rows kept from a previous run up to `epochs_done`.
fn kept_log_rows(path: &Path, epochs_done: usize) -> Vec<String> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|e| e.parse::<usize>().ok()).is_some_and(|e| e < epochs_done))
        .map(str::to_string)
        .collect()
}

fn write_log(path: &Path, rows: &[String]) -> Result<()> {
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(|e| NnError::io(path, e))
}

/// Trains `cfg.stage`, updating only that stage's networks in `state`.
///
/// Batch order and augmentation depend only on `(cfg.seed, epoch)`, so a run
/// resumed from an epoch checkpoint follows the uninterrupted trajectory
/// exactly. A non-finite loss writes `diverged.ckpt` (when an output
/// directory is set) and returns [`NnError::Diverged`].
pub fn train(
    cfg: &TrainConfig,
    samples: &[TrainingSample],
    state: &mut PipelineState,
    op: &dyn InpaintOperator,
    run: &RunOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    check_dataset(cfg, samples, state)?;
    let hash = cfg.trajectory_hash();

    let mut epochs_done = 0;
    let mut steps_done = 0;
    let mut adam = None;
    if let Some(path) = &run.resume {
        let ckpt = Checkpoint::load(path)?;
        let progress = ckpt
            .meta
            .training
            .clone()
            .ok_or_else(|| NnError::checkpoint(path, "checkpoint carries no training progress"))?;
        if progress.stage != cfg.stage {
            return Err(NnError::checkpoint(path, format!("checkpoint is from stage {}, not {}", progress.stage, cfg.stage)));
        }
        if progress.train_config_hash != hash {
            return Err(NnError::checkpoint(path, "training configuration differs from the checkpointed run"));
        }
        *state = ckpt.to_state(path)?;
        let vars = selected_vars(state, cfg.stage);
        adam = ckpt.to_adam(&vars, path)?;
        epochs_done = progress.epochs_done;
        steps_done = progress.steps_done;
    }
    let mut adam = match adam {
        Some(a) => a,
        None => Adam::new(cfg.adam.clone(), &selected_vars(state, cfg.stage))?,
    };

    let log_path = run.out_dir.as_ref().map(|d| d.join(LOG_FILE));
    let mut log_rows = match &log_path {
        Some(p) if run.resume.is_some() => kept_log_rows(p, epochs_done),
        _ => Vec::new(),
    };
    if let Some(dir) = &run.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| NnError::io(dir, e))?;
    }

    let cached = if cfg.augment.is_none() {
        Some(prepare_all(samples, &cfg.shadow)?)
    } else {
        None
    };
    let mut summary = TrainSummary::default();
    let capped = |steps: usize| cfg.max_steps.is_some_and(|m| steps >= m);

    for epoch in epochs_done..cfg.epochs {
        if samples.is_empty() || capped(steps_done) {
            break;
        }
        let lr = lr_schedule(epoch, cfg);
        let order = epoch_order(cfg.seed, epoch, samples.len());
        let mut losses = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            if capped(steps_done) {
                break;
            }
            let prepared = prepare_batch(cfg, samples, cached.as_deref(), epoch, chunk)?;
            let batch = Batch::new(&prepared.iter().collect::<Vec<_>>(), op)?;
            let loss = stage_loss(cfg.stage, state, &batch, &cfg.weights, op)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                if let Some(dir) = &run.out_dir {
                    let progress = progress_of(cfg, &hash, epoch, steps_done, &adam);
                    Checkpoint::from_state(state, Some((progress, &adam)))?.save(&dir.join(DIVERGED_FILE))?;
                }
                return Err(NnError::Diverged {
                    epoch,
                    step: steps_done,
                    loss: value,
                });
            }
            let grads = loss.backward()?;
            let vars = selected_vars(state, cfg.stage);
            adam.step(&vars, &grads, lr)?;
            steps_done += 1;
            losses.push(value);
            summary.step_losses.push(value);
        }
        let epoch_finished = !capped(steps_done) || losses.len() == order.len().div_ceil(cfg.batch_size);
        let mean = if losses.is_empty() {
            0.0
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        summary.epoch_losses.push(mean);
        log::info!("stage {} epoch {epoch}: {} steps, lr {lr:e}, mean loss {mean:.6}", cfg.stage, losses.len());
        if epoch_finished {
            epochs_done = epoch + 1;
        }
        if let (Some(dir), Some(log_path)) = (&run.out_dir, &log_path) {
            log_rows.push(format!("{epoch},{steps_done},{lr:e},{mean:e}"));
            write_log(log_path, &log_rows)?;
            let progress = progress_of(cfg, &hash, epochs_done, steps_done, &adam);
            Checkpoint::from_state(state, Some((progress, &adam)))?.save(&dir.join(CHECKPOINT_FILE))?;
        }
        if !epoch_finished {
            break;
        }
    }
    state.check_finite()?;
    summary.epochs_done = epochs_done;
    summary.steps_done = steps_done;
    Ok(summary)
}

fn selected_vars(state: &PipelineState, stage: Stage) -> Vec<(String, &candle_core::Var)> {
    stage.nets().iter().flat_map(|&n| state.net_vars(n)).collect()
}

fn progress_of(cfg: &TrainConfig, hash: &str, epochs_done: usize, steps_done: usize, adam: &Adam) -> TrainProgress {
    TrainProgress {
        stage: cfg.stage,
        epochs_done,
        steps_done,
        train_config_hash: hash.to_string(),
        adam: adam.config.clone(),
        adam_t: adam.t,
    }
}
