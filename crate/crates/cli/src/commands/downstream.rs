use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};
use stfm::data::{compute_normalization_stats, GeneratorConfig, NormalizationStats, SceneSample};
use stfm::downstream::{
    change_task, classification_task, evaluate as score, finetune as train_head, load_head, normalize_task,
    save_head, segmentation_task, HeadConfig, MetricReport, Task, TaskSample,
};
use stfm::model::{load_checkpoint, save_checkpoint, HybridModel, ModelConfig};
use stfm::pretrain::{RunManifest, RUN_MANIFEST};
use stfm::{rng, Error, Result};

use super::{read_json, write_file, write_json};
use crate::config::{Config, FinetuneSection};

const TASK_RECORD: &str = "task.json";

/// Everything `evaluate` needs to regenerate the exact task split.
#[derive(Serialize, Deserialize)]
struct TaskRecord {
    seed: u64,
    finetune: FinetuneSection,
    generator: GeneratorConfig,
    normalization: NormalizationStats,
    encoder_source: String,
}

struct TaskSplit {
    train: Vec<TaskSample>,
    test: Vec<TaskSample>,
}

fn task_generator(base: &GeneratorConfig, model: &ModelConfig) -> GeneratorConfig {
    GeneratorConfig {
        height: model.image_size.0,
        width: model.image_size.1,
        channels: model.channels,
        frames: model.frames,
        ..base.clone()
    }
}

fn num_classes(task: Task, gen: &GeneratorConfig) -> usize {
    match task {
        Task::Change => 2,
        _ => gen.num_classes(),
    }
}

/// The last `test_fraction` of the generated tiles is the test split; training
/// uses the leading `train_fraction` of the rest.
fn task_split(f: &FinetuneSection, gen: &GeneratorConfig, seed: u64) -> Result<TaskSplit> {
    if !(f.test_fraction > 0.0 && f.test_fraction < 1.0) {
        return Err(Error::Config(format!("finetune.test_fraction {} outside (0, 1)", f.test_fraction)));
    }
    if !(f.train_fraction > 0.0 && f.train_fraction <= 1.0) {
        return Err(Error::Config(format!("finetune.train_fraction {} outside (0, 1]", f.train_fraction)));
    }
    let seed = rng::derive(seed, &[rng::label("task-data")]);
    let pool = match f.task {
        Task::Segmentation => segmentation_task(gen, f.tiles, seed)?,
        Task::Classification => classification_task(gen, f.tiles, f.purity, seed)?,
        Task::Change => change_task(gen, f.tiles, f.change_align, seed)?,
    };
    let n_test = ((f.tiles as f64 * f.test_fraction).round() as usize).clamp(1, f.tiles.saturating_sub(1).max(1));
    if n_test >= pool.len() {
        return Err(Error::Config(format!("finetune.tiles {} leaves no training tiles", f.tiles)));
    }
    let (rest, test) = pool.split_at(pool.len() - n_test);
    let n_train = ((rest.len() as f64 * f.train_fraction).round() as usize).max(1);
    Ok(TaskSplit {
        train: rest[..n_train].to_vec(),
        test: test.to_vec(),
    })
}

fn task_images(samples: &[TaskSample]) -> Vec<SceneSample> {
    samples
        .iter()
        .flat_map(|s| std::iter::once(s.image.clone()).chain(s.other.clone()))
        .collect()
}

fn class_names(task: Task, gen: &GeneratorConfig) -> Vec<String> {
    match task {
        Task::Change => vec!["unchanged".into(), "changed".into()],
        _ => gen.classes.iter().map(|c| c.name.clone()).collect(),
    }
}

fn write_report(out: &Path, report: MetricReport, names: &[String]) -> Result<()> {
    let report = report.with_class_names(names);
    let table = report.to_table();
    info!("\n{table}");
    write_json(&out.join("metrics.json"), &report)?;
    write_file(&out.join("metrics.txt"), table.as_bytes())
}

pub fn finetune(cfg: &Config, out: &Path) -> Result<()> {
    let f = &cfg.finetune;
    let (encoder, stats, source) = match &f.encoder {
        Some(run) => {
            let manifest: RunManifest = read_json(&run.join(RUN_MANIFEST))?;
            let ckpt = run.join("checkpoints").join(&f.checkpoint);
            let (model, _) = load_checkpoint::<f32>(&ckpt)?;
            if model.config != manifest.model {
                return Err(Error::IncompatibleCheckpoint(vec![format!(
                    "{} does not match the model in {}",
                    ckpt.display(),
                    run.join(RUN_MANIFEST).display()
                )]));
            }
            (model, Some(manifest.normalization), ckpt.display().to_string())
        }
        None => (
            HybridModel::<f32>::new(cfg.model.clone(), cfg.train.seed_for("init"))?,
            None,
            "init".to_string(),
        ),
    };
    let gen = task_generator(&cfg.data.generator, &encoder.config);
    let split = task_split(f, &gen, cfg.seed)?;
    let stats = match stats {
        Some(s) => s,
        None => compute_normalization_stats(&task_images(&split.train))?,
    };
    let train = normalize_task(&split.train, &stats)?;
    let test = normalize_task(&split.test, &stats)?;
    let record = TaskRecord {
        seed: cfg.seed,
        finetune: f.clone(),
        generator: gen.clone(),
        normalization: stats,
        encoder_source: source,
    };
    write_json(&out.join(TASK_RECORD), &record)?;

    let head_cfg = HeadConfig {
        hidden: f.hidden,
        encoder_frozen: f.frozen,
        temporal_reduce: f.temporal_reduce,
        ..HeadConfig::new(f.task, num_classes(f.task, &gen))
    };
    info!(
        "fine-tuning a {:?} head ({}) on {} tiles, testing on {}",
        f.task,
        if f.frozen { "frozen encoder" } else { "encoder fine-tuned" },
        train.len(),
        test.len()
    );
    let mut losses = String::new();
    let every = (f.optim.steps / 10).max(1);
    let result = train_head(encoder, head_cfg, &f.optim, &train, &test, |step, loss| {
        losses.push_str(&format!("{{\"step\":{step},\"loss\":{loss}}}\n"));
        if step % every == 0 {
            info!("step {step} loss {loss:.4}");
        }
    })?;
    write_file(&out.join("losses.jsonl"), losses.as_bytes())?;
    save_checkpoint(&out.join("encoder"), &result.encoder, serde_json::Value::Null)?;
    save_head(&out.join("head"), &result.head, &result.encoder.params, serde_json::Value::Null)?;
    let report = result.report.expect("test split is non-empty");
    write_report(out, report, &class_names(f.task, &gen))
}

pub fn evaluate(cfg: &Config, out: &Path) -> Result<()> {
    let run = &cfg.evaluate.run;
    let record: TaskRecord = read_json(&run.join(TASK_RECORD))?;
    let (encoder, _) = load_checkpoint::<f32>(&run.join("encoder"))?;
    let (head, manifest) = load_head(&run.join("head"))?;
    let mut problems = Vec::new();
    if manifest.encoder_digest != encoder.params.digest() {
        problems.push("head was trained against different encoder weights".to_string());
    }
    if manifest.model != encoder.config {
        problems.push("head expects a different encoder architecture".to_string());
    }
    if !problems.is_empty() {
        return Err(Error::IncompatibleCheckpoint(problems));
    }
    let split = task_split(&record.finetune, &record.generator, record.seed)?;
    let samples = match cfg.evaluate.split.as_str() {
        "test" => split.test,
        "train" => split.train,
        other => return Err(Error::Config(format!("evaluate.split {other:?} (expected test or train)"))),
    };
    let samples = normalize_task(&samples, &record.normalization)?;
    info!("evaluating {} {} tiles from {}", samples.len(), cfg.evaluate.split, run.display());
    let report = score(&encoder, &head, &samples, record.finetune.optim.batch_size)?;
    write_report(out, report, &class_names(head.config.task, &record.generator))
}
