use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{forward_loss, prepare_batch, pretrain_step, TrainConfig};
use crate::autodiff::{AdamW, AdamWState, CosineSchedule};
use crate::data::io::write_atomic;
use crate::data::{augment, compute_normalization_stats, AugmentationParams, NormalizationStats, SceneSample};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, read_tensors, save_checkpoint, write_tensors, HybridModel, ModelConfig};
use crate::rng;

pub const METRIC_LOG: &str = "metrics.jsonl";
pub const RUN_MANIFEST: &str = "manifest.json";
const OPTIMIZER: &str = "optimizer.f32";
const STATE: &str = "state.json";

pub struct PretrainData {
    /// Raw (unnormalised) training samples.
    pub train: Vec<SceneSample>,
    pub val: Vec<SceneSample>,
    pub split_digest: String,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub resume: bool,
    /// Stop after this many completed epochs (simulates an interrupted run).
    pub stop_after: Option<usize>,
    /// Extra configuration echoed into the manifest.
    pub extra: serde_json::Value,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            resume: false,
            stop_after: None,
            extra: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub code_version: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split_digest: String,
    pub normalization: NormalizationStats,
    pub seeds: BTreeMap<String, u64>,
    pub metric_log: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub total: f64,
    pub spectral: f64,
    pub spatial: f64,
    pub lr: f64,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_completed: usize,
    pub step: u64,
    pub val_history: Vec<f64>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub optimizer_step: u64,
    pub optimizer_sha256: String,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub state: TrainState,
    pub stopped_early: bool,
    /// Training totals of the steps run by this call.
    pub train_losses: Vec<f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_vec_pretty(value).map_err(Error::json(format!("encoding {}", path.display())))?;
    write_atomic(path, &json)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(Error::io(format!("reading {}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(Error::json(format!("parsing {}", path.display())))
}

fn check_dims(cfg: &ModelConfig, s: &SceneSample) -> Result<()> {
    let d = s.dims();
    let want = [cfg.frames, cfg.channels, cfg.image_size.0, cfg.image_size.1];
    if d.shape() != want {
        return Err(Error::Config(format!(
            "sample {} has shape {:?} but the model expects {want:?}",
            s.sample_id,
            d.shape()
        )));
    }
    Ok(())
}

fn save_state(dir: &Path, model: &HybridModel<f32>, opt: &AdamW<f32>, state: &mut TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    let st = opt.state();
    state.optimizer_step = st.step;
    state.optimizer_sha256 = write_tensors(&dir.join(OPTIMIZER), st.m.iter().chain(st.v.iter()))?;
    save_checkpoint(dir, model, serde_json::to_value(&*state).map_err(Error::json("encoding state"))?)?;
    write_json(&dir.join(STATE), state)
}

fn load_state(dir: &Path, cfg: &ModelConfig) -> Result<(HybridModel<f32>, AdamW<f32>, TrainState)> {
    let (model, _) = load_checkpoint::<f32>(dir)?;
    if &model.config != cfg {
        return Err(Error::IncompatibleCheckpoint(vec![
            "model configuration differs from the resumed run".into(),
        ]));
    }
    let state: TrainState = read_json(&dir.join(STATE))?;
    let shapes: Vec<Vec<usize>> = model.params.iter().map(|p| p.value.shape().to_vec()).collect();
    let both: Vec<Vec<usize>> = shapes.iter().chain(shapes.iter()).cloned().collect();
    let mut moments = read_tensors::<f32>(&dir.join(OPTIMIZER), &both, Some(&state.optimizer_sha256))?;
    let v = moments.split_off(shapes.len());
    let mut opt = AdamW::new(&model.params, 0.0);
    opt.restore(AdamWState {
        step: state.optimizer_step,
        m: moments,
        v,
    });
    Ok((model, opt, state))
}

/// Keeps log records that precede the resumed position.
fn truncate_log(path: &Path, state: &TrainState) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(Error::io(format!("reading {}", path.display())))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(Error::io(format!("reading {}", path.display())))?;
        let rec: MetricRecord = serde_json::from_str(&line).map_err(Error::json("parsing metric log"))?;
        let keep = if rec.split == "train" {
            rec.step < state.step
        } else {
            rec.epoch < state.epochs_completed
        };
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn should_stop(history: &[f64], patience: usize, min_improvement: f64) -> bool {
    if history.len() <= patience {
        return false;
    }
    let split = history.len() - patience;
    let before = history[..split].iter().copied().fold(f64::INFINITY, f64::min);
    let recent = history[split..].iter().copied().fold(f64::INFINITY, f64::min);
    recent > before * (1.0 - min_improvement)
}

/// Mean validation loss over fixed masks, without augmentation or filtering.
pub fn validation_loss(model: &HybridModel<f32>, cfg: &TrainConfig, val: &[SceneSample]) -> Result<(f64, f64, f64, usize)> {
    let grid = model.grid();
    let (mut total, mut spectral, mut spatial, mut m, mut n) = (0.0, 0.0, 0.0, 0, 0);
    for (chunk_index, chunk) in val.chunks(cfg.batch_size).enumerate() {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let plans = (0..chunk.len())
            .map(|i| cfg.val_plan(&grid, chunk_index * cfg.batch_size + i))
            .collect::<Result<Vec<_>>>()?;
        let prepared = prepare_batch(&grid, &refs, &plans, &vec![None; chunk.len()], cfg.loss_on_pimask)?;
        let r = forward_loss(model, &prepared, false)?.report;
        let k = chunk.len() as f64;
        total += r.total * k;
        spectral += r.spectral_term * k;
        spatial += r.spatial_term * k;
        m += r.m;
        n += chunk.len();
    }
    let n = n.max(1) as f64;
    Ok((total / n, spectral / n, spatial / n, m))
}

/// Sample order of `epoch`.
pub fn epoch_order(cfg: &TrainConfig, n: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed_for("shuffle"), &[epoch as u64]));
    order
}

/// Batch `index` of `epoch`: raw samples augmented (seeded by epoch and sample
/// id) and then normalised, exactly as the training loop sees them.
pub fn training_batch(
    cfg: &TrainConfig,
    train: &[SceneSample],
    stats: &NormalizationStats,
    epoch: usize,
    index: usize,
) -> Result<Vec<SceneSample>> {
    let order = epoch_order(cfg, train.len(), epoch);
    let chunk = order
        .chunks(cfg.batch_size)
        .nth(index)
        .ok_or_else(|| Error::Invalid(format!("epoch has no batch {index}")))?;
    chunk
        .iter()
        .map(|&i| {
            let raw = &train[i];
            let view = match &cfg.augment {
                Some(a) => {
                    let d = raw.dims();
                    let seed = rng::derive(cfg.seed_for("augment"), &[epoch as u64, rng::label(&raw.sample_id)]);
                    augment(raw, &AugmentationParams::sample(a, d.h, d.w, d.c, seed))?
                }
                None => raw.clone(),
            };
            stats.normalize(&view)
        })
        .collect()
}

/// Trains from scratch (or resumes) and writes the manifest, metric log and
/// `checkpoints/{last,best}` under `opts.out_dir`.
pub fn run_pretraining(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &PretrainData,
    opts: &RunOptions,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<RunSummary> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Invalid("pretraining needs non-empty train and val splits".into()));
    }
    for s in data.train.iter().chain(&data.val) {
        check_dims(model_cfg, s)?;
    }
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(Error::io(format!("creating {}", out.display())))?;
    let stats = compute_normalization_stats(&data.train)?;
    let seeds: BTreeMap<String, u64> = ["init", "shuffle", "mask", "val-mask", "frequency", "augment"]
        .iter()
        .map(|k| (k.to_string(), cfg.seed_for(k)))
        .collect();
    let manifest = RunManifest {
        kind: "pretrain".into(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        model: model_cfg.clone(),
        train: cfg.clone(),
        split_digest: data.split_digest.clone(),
        normalization: stats.clone(),
        seeds,
        metric_log: METRIC_LOG.into(),
        extra: opts.extra.clone(),
    };
    let manifest_path = out.join(RUN_MANIFEST);
    if opts.resume {
        let previous: RunManifest = read_json(&manifest_path)?;
        if previous.model != manifest.model || previous.train != manifest.train || previous.split_digest != manifest.split_digest {
            return Err(Error::IncompatibleCheckpoint(vec![
                "resume requires the same model, training config and split".into(),
            ]));
        }
    }
    write_json(&manifest_path, &manifest)?;

    let last_dir = out.join("checkpoints").join("last");
    let best_dir = out.join("checkpoints").join("best");
    let log_path = out.join(METRIC_LOG);
    let (mut model, mut opt, mut state) = if opts.resume {
        let (model, mut opt, state) = load_state(&last_dir, model_cfg)?;
        opt.weight_decay = cfg.weight_decay;
        truncate_log(&log_path, &state)?;
        (model, opt, state)
    } else {
        let model = HybridModel::<f32>::new(model_cfg.clone(), cfg.seed_for("init"))?;
        let opt = AdamW::new(&model.params, cfg.weight_decay);
        if log_path.exists() {
            fs::remove_file(&log_path).map_err(Error::io("clearing metric log"))?;
        }
        let state = TrainState {
            epochs_completed: 0,
            step: 0,
            val_history: Vec::new(),
            best_val: None,
            best_epoch: None,
            optimizer_step: 0,
            optimizer_sha256: String::new(),
        };
        (model, opt, state)
    };
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(Error::io(format!("opening {}", log_path.display())))?;
    let mut emit = |rec: MetricRecord, on_record: &mut dyn FnMut(&MetricRecord)| -> Result<()> {
        let line = serde_json::to_string(&rec).map_err(Error::json("encoding metric record"))?;
        writeln!(log, "{line}").map_err(Error::io("writing metric log"))?;
        on_record(&rec);
        Ok(())
    };

    let val: Vec<SceneSample> = data.val.iter().map(|s| stats.normalize(s)).collect::<Result<_>>()?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let schedule = CosineSchedule {
        base_lr: cfg.base_lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps.min(total_steps),
        total_steps,
    };
    let mut train_losses = Vec::new();
    let mut stopped_early = should_stop(&state.val_history, cfg.patience, cfg.min_improvement);
    while state.epochs_completed < cfg.epochs && !stopped_early {
        if opts.stop_after.is_some_and(|k| state.epochs_completed >= k) {
            break;
        }
        let epoch = state.epochs_completed;
        for chunk_index in 0..steps_per_epoch as usize {
            let batch = training_batch(cfg, &data.train, &stats, epoch, chunk_index)?;
            let refs: Vec<&SceneSample> = batch.iter().collect();
            let lr = schedule.lr(state.step);
            let r = pretrain_step(&mut model, &mut opt, &refs, cfg, state.step, lr)?;
            emit(
                MetricRecord {
                    step: state.step,
                    epoch,
                    split: "train".into(),
                    total: r.total,
                    spectral: r.spectral_term,
                    spatial: r.spatial_term,
                    lr,
                    m: r.m,
                },
                &mut on_record,
            )?;
            train_losses.push(r.total);
            state.step += 1;
        }
        let (total, spectral, spatial, m) = validation_loss(&model, cfg, &val)?;
        emit(
            MetricRecord {
                step: state.step,
                epoch,
                split: "val".into(),
                total,
                spectral,
                spatial,
                lr: schedule.lr(state.step.saturating_sub(1)),
                m,
            },
            &mut on_record,
        )?;
        state.val_history.push(total);
        state.epochs_completed += 1;
        if state.best_val.is_none_or(|b| total < b) {
            state.best_val = Some(total);
            state.best_epoch = Some(epoch);
            save_checkpoint(&best_dir, &model, serde_json::json!({ "epoch": epoch, "val_total": total }))?;
        }
        stopped_early = should_stop(&state.val_history, cfg.patience, cfg.min_improvement);
        let finished = state.epochs_completed == cfg.epochs || stopped_early;
        if state.epochs_completed % cfg.checkpoint_every == 0 || finished || opts.stop_after.is_some() {
            save_state(&last_dir, &model, &opt, &mut state)?;
        }
    }
    Ok(RunSummary {
        manifest,
        state,
        stopped_early,
        train_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::should_stop;

    #[test]
    fn stopping_rule() {
        let improving: Vec<f64> = (0..20).map(|i| 1.0 - 0.02 * i as f64).collect();
        assert!(!should_stop(&improving, 10, 0.005));
        let mut flat = vec![1.0, 0.9];
        flat.extend(std::iter::repeat_n(0.899, 10));
        assert!(should_stop(&flat, 10, 0.005));
        assert!(!should_stop(&flat[..5], 10, 0.005));
    }
}
