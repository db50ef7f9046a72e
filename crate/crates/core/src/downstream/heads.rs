//! Lightweight task heads on top of multi-stage encoder features.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{trunc_normal, Bound, Graph, ParamId, ParamStore, RowMap, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, StageFeatures, TokenMap, STAGES};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Segmentation,
    Classification,
    Change,
}

/// How the frame axis collapses before a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemporalReduce {
    #[default]
    Mean,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub task: Task,
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_frozen")]
    pub encoder_frozen: bool,
    #[serde(default)]
    pub temporal_reduce: TemporalReduce,
}

fn default_hidden() -> usize {
    256
}

fn default_frozen() -> bool {
    true
}

impl HeadConfig {
    pub fn new(task: Task, num_classes: usize) -> Self {
        Self {
            task,
            num_classes,
            hidden: default_hidden(),
            encoder_frozen: default_frozen(),
            temporal_reduce: TemporalReduce::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.task == Task::Change && self.num_classes != 2 {
            return Err(Error::Config("change detection is binary (num_classes = 2)".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct HeadIds {
    /// Per-stage pointwise projections; together they form one block-diagonal layer.
    stage_proj: Vec<Linear>,
    fuse: Option<Linear>,
    classifier: Linear,
}

/// A task head with its own parameters.
#[derive(Debug, Clone)]
pub struct Head<S: Scalar> {
    pub config: HeadConfig,
    pub model: ModelConfig,
    pub params: ParamStore<S>,
    ids: HeadIds,
}

fn add_linear<S: Scalar>(
    store: &mut ParamStore<S>,
    r: &mut rng::Rng,
    name: &str,
    din: usize,
    dout: usize,
    std: Option<f64>,
) -> Linear {
    let w = match std {
        Some(std) => trunc_normal(&[din, dout], std, r),
        None => Tensor::zeros(&[din, dout]),
    };
    Linear {
        w: store.add(format!("{name}.weight"), w, true),
        b: store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), false),
    }
}

fn apply<S: Scalar>(g: &mut Graph<S>, p: &Bound, l: Linear, x: Var) -> Var {
    g.linear(x, p.var(l.w), Some(p.var(l.b)))
}

/// 1-D bilinear weights, half-pixel centres, edges clamped.
fn bilinear_taps(src: usize, dst: usize) -> Vec<[(usize, f64); 2]> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (x.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l1 = if i1 == i0 { 0.0 } else { x - i0 as f64 };
            [(i0, 1.0 - l1), (i1, l1)]
        })
        .collect()
}

/// Bilinear resampling of `batch` row-major `[h, w]` grids, as a row map.
pub fn bilinear_map<S: Scalar>(batch: usize, from: (usize, usize), to: (usize, usize)) -> RowMap<S> {
    let ty = bilinear_taps(from.0, to.0);
    let tx = bilinear_taps(from.1, to.1);
    let mut entries = Vec::with_capacity(batch * to.0 * to.1);
    for b in 0..batch {
        for wy in &ty {
            for wx in &tx {
                let mut row: Vec<(usize, S)> = Vec::with_capacity(4);
                for &(y, a) in wy {
                    for &(x, c) in wx {
                        let w = a * c;
                        if w != 0.0 {
                            row.push(((b * from.0 + y) * from.1 + x, S::lit(w)));
                        }
                    }
                }
                entries.push(row);
            }
        }
    }
    RowMap::weighted(batch * from.0 * from.1, entries)
}

fn frame_weights(frames: usize, reduce: TemporalReduce) -> Vec<(usize, f64)> {
    match reduce {
        TemporalReduce::Mean => (0..frames).map(|t| (t, 1.0 / frames as f64)).collect(),
        TemporalReduce::Last => vec![(frames - 1, 1.0)],
    }
}

/// Collapses frames and concatenates spectral groups: `[B·h·w, G·D]`, rows `(b, y, x)`.
pub fn reduce_tokens<S: Scalar>(g: &mut Graph<S>, x: &TokenMap, reduce: TemporalReduce) -> Var {
    let fw = frame_weights(x.frames, reduce);
    let parts: Vec<Var> = (0..x.groups)
        .map(|grp| {
            let mut entries = Vec::with_capacity(x.batch * x.h * x.w);
            for b in 0..x.batch {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        entries.push(
                            fw.iter()
                                .map(|&(t, w)| ((((b * x.frames + t) * x.groups + grp) * x.h + y) * x.w + xx, S::lit(w)))
                                .collect(),
                        );
                    }
                }
            }
            g.row_mix(x.var, Arc::new(RowMap::weighted(x.rows(), entries)))
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    }
}

/// Global average over space after the frame reduction: `[B, G·D]`.
pub fn pool_tokens<S: Scalar>(g: &mut Graph<S>, x: &TokenMap, reduce: TemporalReduce) -> Var {
    let fw = frame_weights(x.frames, reduce);
    let area = (x.h * x.w) as f64;
    let parts: Vec<Var> = (0..x.groups)
        .map(|grp| {
            let entries: Vec<Vec<(usize, S)>> = (0..x.batch)
                .map(|b| {
                    let mut row = Vec::with_capacity(fw.len() * x.h * x.w);
                    for &(t, w) in &fw {
                        for y in 0..x.h {
                            for xx in 0..x.w {
                                row.push(((((b * x.frames + t) * x.groups + grp) * x.h + y) * x.w + xx, S::lit(w / area)));
                            }
                        }
                    }
                    row
                })
                .collect();
            g.row_mix(x.var, Arc::new(RowMap::weighted(x.rows(), entries)))
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_cols(&parts)
    }
}

impl<S: Scalar> Head<S> {
    pub fn new(config: HeadConfig, model: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let mut r = rng::stream(seed, &[rng::label("head-init")]);
        let mut store = ParamStore::new();
        let groups = model.groups();
        let std = Some(model.init_std);
        let k = config.num_classes;
        let ids = match config.task {
            Task::Classification => HeadIds {
                stage_proj: Vec::new(),
                fuse: None,
                classifier: add_linear(&mut store, &mut r, "head.classifier", groups * model.stage_dim(STAGES - 1), k, std),
            },
            Task::Segmentation | Task::Change => {
                let widen = if config.task == Task::Change { 2 } else { 1 };
                let stage_proj = (0..STAGES)
                    .map(|s| {
                        let din = widen * groups * model.stage_dim(s);
                        add_linear(&mut store, &mut r, &format!("head.stage_proj.{s}"), din, config.hidden, std)
                    })
                    .collect();
                let fuse = add_linear(&mut store, &mut r, "head.fuse", STAGES * config.hidden, config.hidden, std);
                // Zero classifier for change detection: equal logits until trained.
                let cls_std = if config.task == Task::Change { None } else { std };
                let classifier = add_linear(&mut store, &mut r, "head.classifier", config.hidden, k, cls_std);
                HeadIds {
                    stage_proj,
                    fuse: Some(fuse),
                    classifier,
                }
            }
        };
        Ok(Self {
            config,
            model: model.clone(),
            params: store,
            ids,
        })
    }

    /// Number of learned linear layers; the per-stage projections count as one.
    pub fn linear_layers(&self) -> usize {
        usize::from(!self.ids.stage_proj.is_empty()) + usize::from(self.ids.fuse.is_some()) + 1
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    fn check_features(&self, f: &StageFeatures) -> Result<()> {
        if f.stages.len() != STAGES {
            return Err(Error::Invalid(format!(
                "head expects {STAGES} stages, got {}",
                f.stages.len()
            )));
        }
        for (s, tm) in f.stages.iter().enumerate() {
            let geom = self.model.stage(s)?;
            if (tm.h, tm.w, tm.dim, tm.groups) != (geom.h, geom.w, geom.dim, self.model.groups()) {
                return Err(Error::Shape {
                    expected: vec![self.model.groups(), geom.h, geom.w, geom.dim],
                    actual: vec![tm.groups, tm.h, tm.w, tm.dim],
                });
            }
        }
        Ok(())
    }

    /// Class logits. Dense tasks give `[B·H·W, K]` with rows `(b, y, x)`;
    /// classification gives `[B, K]`. Change detection takes two feature sets.
    pub fn forward(&self, g: &mut Graph<S>, p: &Bound, feats: &[&StageFeatures]) -> Result<Var> {
        let want = if self.config.task == Task::Change { 2 } else { 1 };
        if feats.len() != want {
            return Err(Error::Invalid(format!(
                "{:?} head takes {want} feature sets, got {}",
                self.config.task,
                feats.len()
            )));
        }
        for f in feats {
            self.check_features(f)?;
        }
        if want == 2 {
            for (a, b) in feats[0].stages.iter().zip(&feats[1].stages) {
                if a.shape() != b.shape() {
                    return Err(Error::Shape {
                        expected: a.shape().to_vec(),
                        actual: b.shape().to_vec(),
                    });
                }
            }
        }
        let reduce = self.config.temporal_reduce;
        if self.config.task == Task::Classification {
            let pooled = pool_tokens(g, &feats[0].stages[STAGES - 1], reduce);
            return Ok(apply(g, p, self.ids.classifier, pooled));
        }
        let first = &feats[0].stages[0];
        let (batch, h1, w1) = (first.batch, first.h, first.w);
        let mut ups = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let tm = &feats[0].stages[s];
            let mut x = reduce_tokens(g, tm, reduce);
            if self.config.task == Task::Change {
                let y = reduce_tokens(g, &feats[1].stages[s], reduce);
                let diff = g.sub(x, y);
                let diff = g.abs(diff);
                let prod = g.mul(x, y);
                x = g.concat_cols(&[diff, prod]);
            }
            let z = apply(g, p, self.ids.stage_proj[s], x);
            ups.push(if (tm.h, tm.w) == (h1, w1) {
                z
            } else {
                g.row_mix(z, Arc::new(bilinear_map(batch, (tm.h, tm.w), (h1, w1))))
            });
        }
        let cat = g.concat_cols(&ups);
        let fuse = self.ids.fuse.expect("dense head has a fuse layer");
        let fused = apply(g, p, fuse, cat);
        let fused = g.gelu(fused);
        let logits = apply(g, p, self.ids.classifier, fused);
        let (h, w) = self.model.image_size;
        Ok(g.row_mix(logits, Arc::new(bilinear_map(batch, (h1, w1), (h, w)))))
    }
}
