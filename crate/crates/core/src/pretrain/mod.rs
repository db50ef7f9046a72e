//! Self-supervised masked reconstruction training.

mod gradcheck;
mod run;
mod switch;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use gradcheck::{finite_difference_check, gradient_check, relative_error, GradCheckReport, GradSample};
pub use run::{
    epoch_order, run_pretraining, training_batch, validation_loss, MetricRecord, PretrainData, RunManifest, RunOptions,
    RunSummary, TrainState, METRIC_LOG, RUN_MANIFEST,
};

use crate::autodiff::{AdamW, Bound, Graph, Var};
use crate::data::{AugmentConfig, SceneSample};
use crate::error::{Error, Result};
use crate::frequency::{apply_frequency_augmentation, FrequencyFilterSpec};
use crate::loss::{loss_mask, loss_objective, LossReport};
use crate::masking::{apply_mask, patchify, MaskPlan, PatchGrid};
use crate::model::{mask_rows, HybridModel};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate after warmup.
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mask_ratio: f64,
    pub pimask_keep: f64,
    /// Count PIMask-visible patches as reconstruction targets.
    pub loss_on_pimask: bool,
    /// `None` disables frequency filtering. Its seed is replaced per sample.
    #[serde(with = "switch")]
    pub frequency: Option<FrequencyFilterSpec>,
    /// `None` disables spatial/colour augmentation.
    #[serde(with = "switch")]
    pub augment: Option<AugmentConfig>,
    /// Write the resumable checkpoint every this many epochs.
    pub checkpoint_every: usize,
    /// Stop once the best validation loss of the last `patience` epochs is
    /// less than `min_improvement` (relative) below the best before them.
    pub patience: usize,
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            base_lr: 1e-3,
            min_lr: 1e-5,
            warmup_steps: 100,
            weight_decay: 0.05,
            seed: 0,
            mask_ratio: 0.75,
            pimask_keep: 0.25,
            loss_on_pimask: false,
            frequency: Some(FrequencyFilterSpec::default()),
            augment: Some(AugmentConfig::default()),
            checkpoint_every: 1,
            patience: 10,
            min_improvement: 0.005,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config("learning rates must satisfy 0 <= min_lr <= base_lr".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if !(0.0..1.0).contains(&self.pimask_keep) {
            return Err(Error::Config(format!("pimask_keep {} outside [0, 1)", self.pimask_keep)));
        }
        if let Some(f) = &self.frequency {
            f.validate()?;
        }
        if self.checkpoint_every == 0 || self.patience == 0 {
            return Err(Error::Config("checkpoint_every and patience must be positive".into()));
        }
        Ok(())
    }

    pub fn seed_for(&self, subsystem: &str) -> u64 {
        rng::derive(self.seed, &[rng::label(subsystem)])
    }

    /// Training mask for sample `index` of step `step`.
    pub fn mask_plan(&self, grid: &PatchGrid, step: u64, index: usize) -> Result<MaskPlan> {
        let seed = rng::derive(self.seed_for("mask"), &[step, index as u64]);
        MaskPlan::sample(grid, self.mask_ratio, self.pimask_keep, seed)
    }

    /// Fixed validation mask for validation sample `index`.
    pub fn val_plan(&self, grid: &PatchGrid, index: usize) -> Result<MaskPlan> {
        let seed = rng::derive(self.seed_for("val-mask"), &[index as u64]);
        MaskPlan::sample(grid, self.mask_ratio, self.pimask_keep, seed)
    }

    pub fn frequency_spec(&self, step: u64, index: usize) -> Option<FrequencyFilterSpec> {
        self.frequency.as_ref().map(|f| FrequencyFilterSpec {
            seed: rng::derive(self.seed_for("frequency"), &[step, index as u64]),
            ..f.clone()
        })
    }
}

/// Encoder inputs and loss targets for one batch.
pub struct PreparedBatch<S> {
    pub ids: Vec<String>,
    /// `[B·T·G·n_h·n_w, p²c_p]`, masked rows zeroed.
    pub patches: Tensor<S>,
    pub masked: Arc<Vec<bool>>,
    /// Clean `[B, T, C, H, W]` target.
    pub target: Tensor<S>,
    pub lmask: Vec<bool>,
    pub channels: Vec<usize>,
}

/// Frequency-filters the encoder view of each sample (when a spec is given),
/// patchifies and masks it; the target keeps the unfiltered values.
pub fn prepare_batch<S: Scalar>(
    grid: &PatchGrid,
    batch: &[&SceneSample<S>],
    plans: &[MaskPlan],
    filters: &[Option<FrequencyFilterSpec>],
    loss_on_pimask: bool,
) -> Result<PreparedBatch<S>> {
    if batch.is_empty() || plans.len() != batch.len() || filters.len() != batch.len() {
        return Err(Error::Invalid(format!(
            "batch of {} with {} plans and {} filters",
            batch.len(),
            plans.len(),
            filters.len()
        )));
    }
    let expected = [grid.t, grid.c, grid.h, grid.w];
    let mut patches = Vec::with_capacity(batch.len() * grid.num_patches() * grid.patch_dim());
    let mut target = Vec::with_capacity(batch.len() * grid.t * grid.c * grid.h * grid.w);
    for ((s, plan), filter) in batch.iter().zip(plans).zip(filters) {
        if s.values.shape() != expected {
            return Err(Error::Shape {
                expected: expected.to_vec(),
                actual: s.values.shape().to_vec(),
            });
        }
        let view = match filter {
            Some(spec) => apply_frequency_augmentation(&s.values, grid, spec)?,
            None => s.values.clone(),
        };
        let p = apply_mask(&patchify(&view, grid)?, plan)?;
        patches.extend_from_slice(p.data());
        target.extend_from_slice(s.values.data());
    }
    let plan_refs: Vec<&MaskPlan> = plans.iter().collect();
    let valid: Vec<&[bool]> = batch.iter().map(|s| s.band_valid.as_slice()).collect();
    Ok(PreparedBatch {
        ids: batch.iter().map(|s| s.sample_id.clone()).collect(),
        patches: Tensor::from_vec(&[batch.len() * grid.num_patches(), grid.patch_dim()], patches)?,
        masked: mask_rows(&plan_refs),
        target: Tensor::from_vec(&[batch.len(), grid.t, grid.c, grid.h, grid.w], target)?,
        lmask: loss_mask(&plan_refs, &valid, loss_on_pimask)?,
        channels: batch.iter().map(|s| s.valid_channels()).collect(),
    })
}

pub struct ForwardPass<S> {
    pub graph: Graph<S>,
    pub params: Bound,
    pub patches: Var,
    pub reconstruction: Var,
    pub loss: Var,
    pub report: LossReport,
}

/// Runs encoder, decoder and loss; `trainable` decides whether parameters track gradients.
pub fn forward_loss<S: Scalar>(model: &HybridModel<S>, batch: &PreparedBatch<S>, trainable: bool) -> Result<ForwardPass<S>> {
    let mut graph = Graph::new();
    let params = graph.bind(&model.params, trainable);
    let patches = graph.constant(batch.patches.clone());
    let b = batch.ids.len();
    let (_, recon) = model.reconstruct(&mut graph, &params, patches, Some(batch.masked.clone()), b)?;
    let (loss, report) = loss_objective(&mut graph, recon, &batch.target, &batch.lmask, &batch.channels)?;
    if !report.is_finite() {
        let v = graph.value(recon);
        let per = v.len() / b;
        let bad: Vec<&str> = batch
            .ids
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                v.data()[i * per..(i + 1) * per].iter().any(|x| !x.is_finite())
                    || batch.target.data()[i * per..(i + 1) * per].iter().any(|x| !x.is_finite())
            })
            .map(|(_, id)| id.as_str())
            .collect();
        let names = if bad.is_empty() { batch.ids.join(", ") } else { bad.join(", ") };
        return Err(Error::NonFinite {
            samples: names,
            total: report.total,
            spectral: report.spectral_term,
            spatial: report.spatial_term,
        });
    }
    Ok(ForwardPass {
        graph,
        params,
        patches,
        reconstruction: recon,
        loss,
        report,
    })
}

/// One optimisation step on an already prepared batch.
pub fn train_on_batch<S: Scalar>(
    model: &mut HybridModel<S>,
    opt: &mut AdamW<S>,
    batch: &PreparedBatch<S>,
    lr: f64,
) -> Result<LossReport> {
    let pass = forward_loss(model, batch, true)?;
    let grads = pass.graph.backward(pass.loss);
    let grads = grads.for_params(&pass.params, &model.params);
    opt.step(&mut model.params, &grads, lr);
    Ok(pass.report)
}

/// Masks and filters `batch` (normalised samples, also the reconstruction
/// targets) exactly as training step `step` does.
pub fn prepare_step<S: Scalar>(
    grid: &PatchGrid,
    batch: &[&SceneSample<S>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<PreparedBatch<S>> {
    let plans = (0..batch.len())
        .map(|i| cfg.mask_plan(grid, step, i))
        .collect::<Result<Vec<_>>>()?;
    let filters: Vec<_> = (0..batch.len()).map(|i| cfg.frequency_spec(step, i)).collect();
    prepare_batch(grid, batch, &plans, &filters, cfg.loss_on_pimask)
}

/// Samples masks and filters for `step`, then takes one optimisation step.
pub fn pretrain_step<S: Scalar>(
    model: &mut HybridModel<S>,
    opt: &mut AdamW<S>,
    batch: &[&SceneSample<S>],
    cfg: &TrainConfig,
    step: u64,
    lr: f64,
) -> Result<LossReport> {
    let prepared = prepare_step(&model.grid(), batch, cfg, step)?;
    train_on_batch(model, opt, &prepared, lr)
}
