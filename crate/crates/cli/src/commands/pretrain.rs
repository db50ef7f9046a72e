use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::Serialize;
use stfm::data::io::{read_samples, read_split};
use stfm::data::{compute_normalization_stats, NormalizationStats, SceneSample};
use stfm::masking::unpatchify;
use stfm::model::{load_checkpoint, HybridModel, ModelConfig};
use stfm::pretrain::{
    forward_loss, gradient_check, prepare_step, run_pretraining, training_batch, PretrainData, RunManifest,
    RunOptions, TrainConfig, RUN_MANIFEST,
};
use stfm::{Error, Result, Tensor};

use super::{io_error, read_json, write_json};
use crate::config::Config;
use crate::render::{save_png, triplet};

fn load_split(dir: &Path) -> Result<PretrainData> {
    let split = read_split(dir)?;
    Ok(PretrainData {
        train: read_samples(dir, &split.train_ids)?,
        val: read_samples(dir, &split.val_ids)?,
        split_digest: split.digest(),
    })
}

pub fn pretrain(cfg: &Config, out: &Path, resume: bool) -> Result<()> {
    let data = load_split(&cfg.data.dir)?;
    info!(
        "pretraining on {} train / {} val tiles from {}",
        data.train.len(),
        data.val.len(),
        cfg.data.dir.display()
    );
    let mut opts = RunOptions::new(out);
    opts.resume = resume;
    opts.extra = serde_json::json!({ "data_dir": cfg.data.dir });
    let every = (data.train.len().div_ceil(cfg.train.batch_size) as u64).max(1);
    let summary = run_pretraining(&cfg.model, &cfg.train, &data, &opts, |r| {
        if r.split == "val" {
            info!(
                "epoch {} val total {:.4} (spectral {:.4}, spatial {:.4})",
                r.epoch, r.total, r.spectral, r.spatial
            );
        } else if r.step % every == 0 {
            info!("step {} train total {:.4} lr {:.2e}", r.step, r.total, r.lr);
        }
    })?;
    info!(
        "done after {} epochs ({} steps); best val {:?} at epoch {:?}{}",
        summary.state.epochs_completed,
        summary.state.step,
        summary.state.best_val,
        summary.state.best_epoch,
        if summary.stopped_early { ", stopped early" } else { "" }
    );
    Ok(())
}

#[derive(Serialize)]
struct ReconstructionReport {
    source: String,
    step: u64,
    samples: Vec<String>,
    total: f64,
    spectral: f64,
    spatial: f64,
    m: usize,
    images: Vec<String>,
}

/// Model, training config and statistics: either a finished run's, or the
/// initialisation `pretrain` would start from with the current config.
fn reconstruction_source(cfg: &Config, train: &[SceneSample]) -> Result<(HybridModel<f32>, TrainConfig, NormalizationStats, String)> {
    let Some(run) = &cfg.reconstruct.run else {
        let model = HybridModel::<f32>::new(cfg.model.clone(), cfg.train.seed_for("init"))?;
        return Ok((model, cfg.train.clone(), compute_normalization_stats(train)?, "init".into()));
    };
    let manifest: RunManifest = read_json(&run.join(RUN_MANIFEST))?;
    let ckpt = run.join("checkpoints").join(&cfg.reconstruct.checkpoint);
    let (model, _) = load_checkpoint::<f32>(&ckpt)?;
    if model.config != manifest.model {
        return Err(Error::IncompatibleCheckpoint(vec![format!(
            "{} holds a different model than {}",
            ckpt.display(),
            run.join(RUN_MANIFEST).display()
        )]));
    }
    Ok((model, manifest.train, manifest.normalization, ckpt.display().to_string()))
}

/// Losses and images for the first training batch, masked as at step 0.
pub fn reconstruct(cfg: &Config, out: &Path) -> Result<()> {
    let data = load_split(&cfg.data.dir)?;
    let (model, train_cfg, stats, source) = reconstruction_source(cfg, &data.train)?;
    if let Some(run) = &cfg.reconstruct.run {
        let manifest: RunManifest = read_json(&run.join(RUN_MANIFEST))?;
        if manifest.split_digest != data.split_digest {
            warn!("dataset split differs from the one {} was trained on", run.display());
        }
    }
    let grid = model.grid();
    let batch = training_batch(&train_cfg, &data.train, &stats, 0, 0)?;
    let refs: Vec<&SceneSample> = batch.iter().collect();
    let prepared = prepare_step(&grid, &refs, &train_cfg, 0)?;
    let pass = forward_loss(&model, &prepared, false)?;
    let recon = pass.graph.value(pass.reconstruction);

    let img_dir = out.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| io_error(e, format!("creating {}", img_dir.display())))?;
    let (np, pd, per) = (grid.num_patches(), grid.patch_dim(), grid.t * grid.c * grid.h * grid.w);
    let spatial = grid.n_h * grid.n_w;
    let mut images = Vec::new();
    for (b, sample) in batch.iter().enumerate().take(cfg.reconstruct.images) {
        let with = |values: Tensor<f32>| SceneSample { values, ..sample.clone() };
        let view = Tensor::from_vec(&grid.patch_tensor_shape(), prepared.patches.data()[b * np * pd..(b + 1) * np * pd].to_vec())?;
        let masked_view = with(unpatchify(&view, &grid)?);
        let output = with(Tensor::from_vec(sample.values.shape(), recon.data()[b * per..(b + 1) * per].to_vec())?);
        let hidden: Vec<bool> = (0..grid.t)
            .flat_map(|t| {
                let start = b * np + t * grid.groups * spatial;
                prepared.masked[start..start + spatial].iter().copied()
            })
            .collect();
        let img = triplet(
            &stats.denormalize(sample)?,
            &stats.denormalize(&masked_view)?,
            &stats.denormalize(&output)?,
            &hidden,
            grid.p,
        );
        let name = format!("{b:02}_{}.png", sample.sample_id.replace(['~', '/'], "_"));
        save_png(&img, &img_dir.join(&name))?;
        images.push(format!("images/{name}"));
    }
    let r = &pass.report;
    info!("step-0 batch loss {:.6} over {} elements; {} images in {}", r.total, r.m, images.len(), img_dir.display());
    write_json(
        &out.join("loss.json"),
        &ReconstructionReport {
            source,
            step: 0,
            samples: prepared.ids.clone(),
            total: r.total,
            spectral: r.spectral_term,
            spatial: r.spatial_term,
            m: r.m,
            images,
        },
    )
}

pub fn grad_check(cfg: &Config, out: &Path) -> Result<()> {
    let g = &cfg.grad_check;
    let model = ModelConfig::preset(&g.preset)?;
    let report = gradient_check(&model, cfg.seed, g.samples, g.step, g.threshold)?;
    write_json(&out.join("grad_check.json"), &report)?;
    info!(
        "{} of {} coordinates significant; max relative error {:.3e} (threshold {:.0e}): {}",
        report.significant,
        report.checked,
        report.max_rel_error,
        report.threshold,
        if report.passed { "pass" } else { "FAIL" }
    );
    report.into_result().map(|_| ())
}
