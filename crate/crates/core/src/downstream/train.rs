//! Supervised fine-tuning and evaluation of task heads.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::heads::{Head, HeadConfig, Task};
use super::metrics::{compute_metrics_with_scores, MetricReport};
use crate::autodiff::{AdamW, Bound, Graph, ParamStore, Var};
use crate::data::io::write_atomic;
use crate::data::{NormalizationStats, SceneSample};
use crate::error::{Error, Result};
use crate::model::{patch_rows, read_tensors, write_tensors, HybridModel, ModelConfig, StageFeatures};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    /// Per-pixel class ids `[H, W]`; negative ids are ignored.
    Dense(Vec<i32>),
}

/// One labelled example. Change detection carries the "after" image in `other`.
#[derive(Debug, Clone)]
pub struct TaskSample {
    pub id: String,
    pub image: SceneSample,
    pub other: Option<SceneSample>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Encoder learning rate relative to `lr` when the encoder is trained.
    pub encoder_lr_scale: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Inverse-frequency class weights in the loss.
    pub class_weighting: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            lr: 1e-3,
            encoder_lr_scale: 0.1,
            weight_decay: 0.0,
            seed: 0,
            class_weighting: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("finetune steps and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.encoder_lr_scale >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("finetune rates must be non-negative".into()));
        }
        Ok(())
    }
}

/// Brings a sample to the encoder's frame count; single images are repeated.
pub fn adapt_frames(sample: &SceneSample, frames: usize) -> Result<SceneSample> {
    match sample.dims().t {
        t if t == frames => Ok(sample.clone()),
        1 => sample.repeat_frames(frames),
        t => Err(Error::Invalid(format!(
            "sample {} has {t} frames; the encoder takes {frames}",
            sample.sample_id
        ))),
    }
}

/// Normalises both images of every sample with the pretraining statistics.
pub fn normalize_task(samples: &[TaskSample], stats: &NormalizationStats) -> Result<Vec<TaskSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(TaskSample {
                id: s.id.clone(),
                image: stats.normalize(&s.image)?,
                other: s.other.as_ref().map(|o| stats.normalize(o)).transpose()?,
                target: s.target.clone(),
            })
        })
        .collect()
}

fn check_sample(model: &ModelConfig, head: &HeadConfig, s: &TaskSample) -> Result<()> {
    let (h, w) = model.image_size;
    for img in std::iter::once(&s.image).chain(s.other.as_ref()) {
        let d = img.dims();
        if (d.c, d.h, d.w) != (model.channels, h, w) {
            return Err(Error::Shape {
                expected: vec![model.channels, h, w],
                actual: vec![d.c, d.h, d.w],
            });
        }
    }
    match (&s.target, head.task) {
        (Target::Class(k), Task::Classification) if *k < head.num_classes => {}
        (Target::Dense(ids), Task::Segmentation | Task::Change)
            if ids.len() == h * w && ids.iter().all(|&i| i < head.num_classes as i32) => {}
        _ => {
            return Err(Error::Invalid(format!(
                "sample {} has a target that does not fit a {:?} head with {} classes",
                s.id, head.task, head.num_classes
            )))
        }
    }
    if (head.task == Task::Change) != s.other.is_some() {
        return Err(Error::Invalid(format!(
            "sample {}: change detection needs exactly two images, other tasks one",
            s.id
        )));
    }
    Ok(())
}

fn prepare(model: &ModelConfig, head: &HeadConfig, samples: &[TaskSample]) -> Result<Vec<TaskSample>> {
    samples
        .iter()
        .map(|s| {
            check_sample(model, head, s)?;
            Ok(TaskSample {
                id: s.id.clone(),
                image: adapt_frames(&s.image, model.frames)?,
                other: s.other.as_ref().map(|o| adapt_frames(o, model.frames)).transpose()?,
                target: s.target.clone(),
            })
        })
        .collect()
}

fn encode(model: &HybridModel<f32>, g: &mut Graph<f32>, p: &Bound, images: &[&SceneSample]) -> Result<StageFeatures> {
    let grid = model.grid();
    let tensors: Vec<&Tensor<f32>> = images.iter().map(|s| &s.values).collect();
    let patches = g.constant(patch_rows(&grid, &tensors)?);
    model.encode(g, p, patches, None, images.len())
}

/// Builds the head logits for a batch. Change pairs run the encoder once per
/// side with shared weights.
fn logits(
    model: &HybridModel<f32>,
    head: &Head<f32>,
    g: &mut Graph<f32>,
    enc: &Bound,
    hp: &Bound,
    batch: &[&TaskSample],
) -> Result<Var> {
    let a: Vec<&SceneSample> = batch.iter().map(|s| &s.image).collect();
    let fa = encode(model, g, enc, &a)?;
    if head.config.task == Task::Change {
        let b: Vec<&SceneSample> = batch.iter().map(|s| s.other.as_ref().expect("checked pair")).collect();
        let fb = encode(model, g, enc, &b)?;
        head.forward(g, hp, &[&fa, &fb])
    } else {
        head.forward(g, hp, &[&fa])
    }
}

/// Per-row labels of a batch, `None` where ignored.
fn batch_labels(batch: &[&TaskSample]) -> Vec<Option<usize>> {
    batch
        .iter()
        .flat_map(|s| match &s.target {
            Target::Class(k) => vec![Some(*k)],
            Target::Dense(ids) => ids.iter().map(|&i| usize::try_from(i).ok()).collect(),
        })
        .collect()
}

/// Mean (optionally class-weighted) softmax cross-entropy over labelled rows,
/// with its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &[f32], k: usize, labels: &[Option<usize>], weights: Option<&[f64]>) -> (f64, Vec<f32>) {
    let mut grad = vec![0f32; logits.len()];
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut probs = vec![0f64; k];
    for (r, label) in labels.iter().enumerate() {
        let Some(y) = *label else { continue };
        let w = weights.map_or(1.0, |w| w[y]);
        if w == 0.0 {
            continue;
        }
        let row = &logits[r * k..(r + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let mut sum = 0.0;
        for (p, &v) in probs.iter_mut().zip(row) {
            *p = (v as f64 - max).exp();
            sum += *p;
        }
        total += w * (sum.ln() + max - row[y] as f64);
        norm += w;
        for (c, p) in probs.iter().enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            grad[r * k + c] = (w * (p / sum - target)) as f32;
        }
    }
    if norm > 0.0 {
        grad.iter_mut().for_each(|g| *g /= norm as f32);
        (total / norm, grad)
    } else {
        (0.0, grad)
    }
}

/// `N / (K · n_c)` for present classes, zero for absent ones.
pub fn inverse_frequency_weights(samples: &[TaskSample], k: usize) -> Vec<f64> {
    let refs: Vec<&TaskSample> = samples.iter().collect();
    let mut counts = vec![0usize; k];
    for y in batch_labels(&refs).into_iter().flatten() {
        counts[y] += 1;
    }
    let n: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n as f64 / (k * c) as f64 })
        .collect()
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub head: Head<f32>,
    pub encoder: HybridModel<f32>,
    pub losses: Vec<f64>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    /// Metrics on the held-out samples; `None` when none were given.
    pub report: Option<MetricReport>,
}

/// Trains a fresh head (and the encoder unless frozen) on `train`, then
/// evaluates on `test`. A frozen encoder is verified bit-identical afterwards.
pub fn finetune(
    model: HybridModel<f32>,
    head_cfg: HeadConfig,
    cfg: &FinetuneConfig,
    train: &[TaskSample],
    test: &[TaskSample],
    mut on_step: impl FnMut(usize, f64),
) -> Result<FinetuneResult> {
    cfg.validate()?;
    head_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("fine-tuning needs training samples".into()));
    }
    let mut model = model;
    let train = prepare(&model.config, &head_cfg, train)?;
    let test = prepare(&model.config, &head_cfg, test)?;
    let mut head = Head::<f32>::new(head_cfg.clone(), &model.config, rng::derive(cfg.seed, &[rng::label("head")]))?;
    let frozen = head_cfg.encoder_frozen;
    let weights = cfg
        .class_weighting
        .then(|| inverse_frequency_weights(&train, head_cfg.num_classes));
    let before = model.params.digest();
    let mut head_opt = AdamW::new(&head.params, cfg.weight_decay);
    let mut enc_opt = AdamW::new(&model.params, cfg.weight_decay);
    let shuffle = rng::derive(cfg.seed, &[rng::label("finetune-shuffle")]);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size.min(train.len()) {
            if order.is_empty() {
                order = (0..train.len()).collect();
                order.shuffle(&mut rng::stream(shuffle, &[epoch]));
                order.reverse();
                epoch += 1;
            }
            idx.push(order.pop().expect("refilled"));
        }
        let batch: Vec<&TaskSample> = idx.iter().map(|&i| &train[i]).collect();
        let mut g = Graph::new();
        let enc = g.bind(&model.params, !frozen);
        let hp = g.bind(&head.params, true);
        let out = logits(&model, &head, &mut g, &enc, &hp, &batch)?;
        let (loss, grad) = cross_entropy(g.value(out).data(), head_cfg.num_classes, &batch_labels(&batch), weights.as_deref());
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                samples: batch.iter().map(|s| s.id.as_str()).collect::<Vec<_>>().join(", "),
                total: loss,
                spectral: f64::NAN,
                spatial: f64::NAN,
            });
        }
        let root = g.objective(out, loss as f32, grad);
        let grads = g.backward(root);
        let head_grads = grads.for_params(&hp, &head.params);
        head_opt.step(&mut head.params, &head_grads, cfg.lr);
        if !frozen {
            let enc_grads = grads.for_params(&enc, &model.params);
            enc_opt.step(&mut model.params, &enc_grads, cfg.lr * cfg.encoder_lr_scale);
        }
        losses.push(loss);
        on_step(step, loss);
    }
    let after = model.params.digest();
    if frozen && after != before {
        return Err(Error::Invalid("frozen encoder parameters changed during fine-tuning".into()));
    }
    let report = if test.is_empty() {
        None
    } else {
        Some(evaluate_prepared(&model, &head, &test, cfg.batch_size)?)
    };
    Ok(FinetuneResult {
        head,
        encoder: model,
        losses,
        encoder_digest_before: before,
        encoder_digest_after: after,
        report,
    })
}

/// Softmax scores `[N, K]` and labels of every labelled item (tile or pixel).
pub fn predict(
    model: &HybridModel<f32>,
    head: &Head<f32>,
    samples: &[TaskSample],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let samples = prepare(&model.config, &head.config, samples)?;
    predict_prepared(model, head, &samples, batch_size)
}

fn predict_prepared(
    model: &HybridModel<f32>,
    head: &Head<f32>,
    samples: &[TaskSample],
    batch_size: usize,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let k = head.config.num_classes;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&TaskSample> = chunk.iter().collect();
        let mut g = Graph::new();
        let enc = g.bind(&model.params, false);
        let hp = g.bind(&head.params, false);
        let out = logits(model, head, &mut g, &enc, &hp, &batch)?;
        let rows = g.value(out).data();
        for (r, label) in batch_labels(&batch).into_iter().enumerate() {
            let Some(y) = label else { continue };
            let row = &rows[r * k..(r + 1) * k];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            scores.extend(e.iter().map(|v| v / sum));
            labels.push(y);
        }
    }
    Ok((scores, labels))
}

fn evaluate_prepared(model: &HybridModel<f32>, head: &Head<f32>, samples: &[TaskSample], batch_size: usize) -> Result<MetricReport> {
    let (scores, labels) = predict_prepared(model, head, samples, batch_size)?;
    compute_metrics_with_scores(&scores, &labels, head.config.num_classes)
}

pub fn evaluate(model: &HybridModel<f32>, head: &Head<f32>, samples: &[TaskSample], batch_size: usize) -> Result<MetricReport> {
    let (scores, labels) = predict(model, head, samples, batch_size)?;
    compute_metrics_with_scores(&scores, &labels, head.config.num_classes)
}

pub const HEAD_VERSION: u32 = 1;
const HEAD_MANIFEST: &str = "head.json";
const HEAD_PAYLOAD: &str = "head.f32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadManifest {
    pub version: u32,
    pub head: HeadConfig,
    pub model: ModelConfig,
    /// Digest of the encoder the head was trained with.
    pub encoder_digest: String,
    pub dtype: String,
    pub byte_order: String,
    pub payload: String,
    pub sha256: String,
    pub params: Vec<(String, Vec<usize>)>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_head(dir: &Path, head: &Head<f32>, encoder: &ParamStore<f32>, extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(format!("creating {}", dir.display())))?;
    let sha256 = write_tensors(&dir.join(HEAD_PAYLOAD), head.params.iter().map(|p| &p.value))?;
    let manifest = HeadManifest {
        version: HEAD_VERSION,
        head: head.config.clone(),
        model: head.model.clone(),
        encoder_digest: encoder.digest(),
        dtype: "f32".into(),
        byte_order: "little".into(),
        payload: HEAD_PAYLOAD.into(),
        sha256,
        params: head.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect(),
        extra,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(Error::json("encoding head manifest"))?;
    write_atomic(&dir.join(HEAD_MANIFEST), &json)
}

pub fn load_head(dir: &Path) -> Result<(Head<f32>, HeadManifest)> {
    let path = dir.join(HEAD_MANIFEST);
    let bytes = fs::read(&path).map_err(Error::io(format!("reading {}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes).map_err(Error::json(format!("parsing {}", path.display())))?;
    let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if version != HEAD_VERSION {
        return Err(Error::UnknownVersion {
            found: version,
            supported: HEAD_VERSION,
        });
    }
    let manifest: HeadManifest = serde_json::from_value(raw).map_err(Error::json(format!("parsing {}", path.display())))?;
    let mut head = Head::<f32>::new(manifest.head.clone(), &manifest.model, 0)?;
    let expected: Vec<(String, Vec<usize>)> = head.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    if expected != manifest.params {
        let problems = expected
            .iter()
            .zip(&manifest.params)
            .filter(|(a, b)| a != b)
            .map(|(a, b)| format!("{} {:?} recorded as {} {:?}", a.0, a.1, b.0, b.1))
            .chain((expected.len() != manifest.params.len()).then(|| {
                format!("{} parameters recorded, head has {}", manifest.params.len(), expected.len())
            }))
            .collect();
        return Err(Error::IncompatibleCheckpoint(problems));
    }
    let shapes: Vec<Vec<usize>> = expected.into_iter().map(|(_, s)| s).collect();
    let values = read_tensors::<f32>(&dir.join(&manifest.payload), &shapes, Some(&manifest.sha256))?;
    for (p, v) in head.params.iter_mut().zip(values) {
        p.value = v;
    }
    Ok((head, manifest))
}
