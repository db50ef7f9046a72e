//! Run configuration: one TOML file, layered over built-in defaults, with
//! `key=value` overrides applied last.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stfm::data::GeneratorConfig;
use stfm::downstream::{FinetuneConfig, Task, TemporalReduce};
use stfm::model::ModelConfig;
use stfm::pretrain::TrainConfig;
use stfm::{Error, Result};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Drives every random stream; copied into the section seeds.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneSection,
    pub evaluate: EvaluateSection,
    pub reconstruct: ReconstructSection,
    pub grad_check: GradCheckSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory read by `pretrain` and `reconstruct`.
    pub dir: PathBuf,
    pub scenes: usize,
    /// Scenes are cut into square tiles of this side (stride equal to the side).
    pub tile_size: usize,
    /// Share of scenes rendered with four bands and padded to six.
    pub four_band_fraction: f64,
    pub ratios: [f64; 3],
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    /// Pretraining run directory; without it the encoder is freshly initialised.
    pub encoder: Option<PathBuf>,
    /// `best` or `last`.
    pub checkpoint: String,
    pub task: Task,
    /// Synthetic tiles generated for the task; the tail forms the test split.
    pub tiles: usize,
    pub test_fraction: f64,
    /// Share of the non-test tiles used for training.
    pub train_fraction: f64,
    /// Share of cells carrying the tile label (classification).
    pub purity: f64,
    /// Pixel alignment of the changed rectangle (change detection).
    pub change_align: usize,
    pub frozen: bool,
    pub hidden: usize,
    pub temporal_reduce: TemporalReduce,
    pub optim: FinetuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Output directory of a `finetune` run.
    pub run: PathBuf,
    /// `test` or `train`.
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructSection {
    /// Pretraining run directory; without it the model is the untrained
    /// initialisation that `pretrain` would start from.
    pub run: Option<PathBuf>,
    pub checkpoint: String,
    /// Number of samples rendered as image triplets.
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    /// Model preset; the check runs in 64-bit.
    pub preset: String,
    pub samples: usize,
    pub step: f64,
    pub threshold: f64,
}

impl Default for Config {
    fn default() -> Self {
        let model = ModelConfig::desk();
        Self {
            seed: 0,
            data: DataSection {
                generator: GeneratorConfig {
                    height: 128,
                    width: 128,
                    frames: model.frames,
                    ..GeneratorConfig::default()
                },
                ..DataSection::default()
            },
            model,
            train: TrainConfig::default(),
            finetune: FinetuneSection::default(),
            evaluate: EvaluateSection::default(),
            reconstruct: ReconstructSection::default(),
            grad_check: GradCheckSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/data"),
            scenes: 32,
            tile_size: 64,
            four_band_fraction: 0.25,
            ratios: [0.7, 0.2, 0.1],
            generator: GeneratorConfig::default(),
        }
    }
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            encoder: None,
            checkpoint: "best".into(),
            task: Task::Classification,
            tiles: 200,
            test_fraction: 0.2,
            train_fraction: 0.2,
            purity: 0.75,
            change_align: 8,
            frozen: true,
            hidden: 256,
            temporal_reduce: TemporalReduce::Mean,
            optim: FinetuneConfig::default(),
        }
    }
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            run: PathBuf::from("runs/finetune"),
            split: "test".into(),
        }
    }
}

impl Default for ReconstructSection {
    fn default() -> Self {
        Self {
            run: None,
            checkpoint: "last".into(),
            images: 4,
        }
    }
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            preset: "tiny".into(),
            samples: 200,
            step: 1e-3,
            threshold: 1e-4,
        }
    }
}

impl Config {
    /// Defaults, then the file (if any), then each `key=value` override, then `seed`.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut tree = Table::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                context: format!("reading config {}", path.display()),
                source: e,
            })?;
            tree = text
                .parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        if let Some(seed) = seed {
            tree.insert("seed".into(), Value::Integer(seed as i64));
        }
        let mut base = Value::try_from(Config::default()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(preset) = take_preset(&mut tree)? {
            let model = Value::try_from(ModelConfig::preset(&preset)?).map_err(|e| Error::Config(e.to_string()))?;
            base.as_table_mut().expect("config serialises to a table").insert("model".into(), model);
        }
        merge(&mut base, Value::Table(tree));
        let mut cfg: Config = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.finetune.optim.seed = cfg.seed;
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.data.generator.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// `model.preset = "name"` swaps the model defaults before the other model keys apply.
fn take_preset(tree: &mut Table) -> Result<Option<String>> {
    let Some(Value::Table(model)) = tree.get_mut("model") else {
        return Ok(None);
    };
    match model.remove("preset") {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::Config(format!("model.preset must be a string, got {other}"))),
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back to
/// a bare string.
pub fn apply_override(tree: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override {spec:?} has an empty key")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut node = tree;
    for p in parts {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {spec:?}: {p} is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = Config::default();
        let text = cfg.to_toml().unwrap();
        let dir = std::env::temp_dir().join(format!("stfm-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.toml");
        fs::write(&path, text).unwrap();
        assert_eq!(Config::load(Some(&path), &[], None).unwrap(), cfg);
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn overrides_and_seed_apply() {
        let sets = vec![
            "train.epochs=3".to_string(),
            "train.frequency=off".to_string(),
            "finetune.task=segmentation".to_string(),
            "data.dir=some/where".to_string(),
        ];
        let cfg = Config::load(None, &sets, Some(9)).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(cfg.train.frequency.is_none());
        assert_eq!(cfg.finetune.task, Task::Segmentation);
        assert_eq!(cfg.data.dir, PathBuf::from("some/where"));
        assert_eq!((cfg.seed, cfg.train.seed, cfg.finetune.optim.seed), (9, 9, 9));
    }

    #[test]
    fn preset_then_model_keys() {
        let sets = vec!["model.preset=tiny".to_string(), "model.embed_dim=16".to_string()];
        let cfg = Config::load(None, &sets, None).unwrap();
        assert_eq!(cfg.model, ModelConfig { embed_dim: 16, ..ModelConfig::tiny() });
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for bad in ["train.epoch=3", "bogus=1", "model.preset=huge", "train.frequency.cutoff=0.3"] {
            let err = Config::load(None, &[bad.to_string()], None).unwrap_err();
            assert_eq!(err.kind(), stfm::ErrorKind::Config, "{bad}: {err}");
        }
        assert!(Config::load(None, &["novalue".to_string()], None).is_err());
    }
}
