//! Hybrid convolution/attention encoder with a per-token pixel-block decoder.

mod checkpoint;
mod config;
mod layout;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

pub use checkpoint::{
    load_checkpoint, read_tensors, save_checkpoint, write_tensors, CheckpointManifest, ParamEntry,
    CHECKPOINT_VERSION, PATCH_ORDER,
};
pub use config::{ModelConfig, StageGeometry, STAGES};
pub use layout::{relative_position_index, shifted_window_mask, window_order, Layout};

use crate::autodiff::{trunc_normal, uniform, Bound, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::masking::{patchify, MaskPlan, PatchGrid};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Tokens of one stage, rows ordered `(sample, frame, group, row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMap {
    pub var: Var,
    pub stage: usize,
    pub batch: usize,
    pub frames: usize,
    pub groups: usize,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl TokenMap {
    /// `[B, T, G, h, w, D]`.
    pub fn shape(&self) -> [usize; 6] {
        [self.batch, self.frames, self.groups, self.h, self.w, self.dim]
    }

    pub fn rows(&self) -> usize {
        self.batch * self.frames * self.groups * self.h * self.w
    }
}

#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub stages: Vec<TokenMap>,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct BlockIds {
    norm_spatial: Norm,
    norm_temporal: Norm,
    norm_ffn: Norm,
    norm_hf: Norm,
    qkv: Linear,
    proj: Linear,
    spatial_bias: ParamId,
    temporal_bias: ParamId,
    fc1: Linear,
    fc2: Linear,
    hf_reduce: Linear,
    hf_conv: Linear,
    hf_expand: Linear,
}

#[derive(Debug, Clone)]
struct StageIds {
    blocks: Vec<BlockIds>,
    merge: Option<(Norm, Linear)>,
}

#[derive(Debug, Clone)]
struct ModelIds {
    embed: Linear,
    embed_norm: Norm,
    mask_token: ParamId,
    stages: Vec<StageIds>,
    decoder_norm: Norm,
    decoder: Linear,
}

struct Init<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: Rng,
    std: f64,
}

impl<S: Scalar> Init<'_, S> {
    fn linear(&mut self, name: &str, din: usize, dout: usize, bias: bool) -> Linear {
        let w = self
            .store
            .add(format!("{name}.weight"), trunc_normal(&[din, dout], self.std, &mut self.rng), true);
        let b = bias.then(|| self.store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), false));
        Linear { w, b }
    }

    /// Convolution-style weight U(±1/√fan_in), zero bias: the patch embedding is
    /// a strided convolution, and its pre-norm output should be of unit order.
    fn conv_linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let bound = 1.0 / (din as f64).sqrt();
        let w = self
            .store
            .add(format!("{name}.weight"), uniform(&[din, dout], bound, &mut self.rng), true);
        let b = self.store.add(format!("{name}.bias"), Tensor::zeros(&[dout]), false);
        Linear { w, b: Some(b) }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.store.add(format!("{name}.weight"), Tensor::full(&[dim], S::one()), false),
            beta: self.store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
        }
    }

    fn table(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.table_with_std(name, shape, self.std)
    }

    fn table_with_std(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        self.store.add(name, trunc_normal(shape, std, &mut self.rng), false)
    }
}

pub struct HybridModel<S: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    ids: ModelIds,
    layouts: Mutex<HashMap<usize, Arc<Layout<S>>>>,
}

impl<S: Scalar> Clone for HybridModel<S> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            ids: self.ids.clone(),
            layouts: Mutex::new(HashMap::new()),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for HybridModel<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HybridModel")
            .field("config", &self.config)
            .field("parameters", &self.params.num_elements())
            .finish()
    }
}

fn lin<S: Scalar>(g: &mut Graph<S>, p: &Bound, l: &Linear, x: Var) -> Var {
    g.linear(x, p.var(l.w), l.b.map(|b| p.var(b)))
}

fn norm<S: Scalar>(g: &mut Graph<S>, p: &Bound, n: &Norm, x: Var) -> Var {
    g.layer_norm(x, p.var(n.gamma), p.var(n.beta))
}

impl<S: Scalar> HybridModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: rng::stream(seed, &[rng::label("model-init")]),
            std: config.init_std,
        };
        let grid = config.patch_grid()?;
        let d0 = config.embed_dim;
        let embed = init.conv_linear("patch_embed.proj", grid.patch_dim(), d0);
        let embed_norm = init.norm("patch_embed.norm", d0);
        // Stands in for layer-normed embeddings, so unit scale.
        let mask_token = init.table_with_std("mask_token", &[d0], 1.0);
        let k2 = config.hf_kernel * config.hf_kernel;
        let t = config.frames;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let geom = config.stage(s)?;
            let d = geom.dim;
            let r = config.hf_bottleneck(d);
            let blocks = (0..config.depths[s])
                .map(|b| {
                    let n = format!("stages.{s}.blocks.{b}");
                    BlockIds {
                        norm_spatial: init.norm(&format!("{n}.norm_spatial"), d),
                        norm_temporal: init.norm(&format!("{n}.norm_temporal"), d),
                        norm_ffn: init.norm(&format!("{n}.norm_ffn"), d),
                        norm_hf: init.norm(&format!("{n}.norm_hf"), d),
                        qkv: init.linear(&format!("{n}.attn.qkv"), d, 3 * d, true),
                        proj: init.linear(&format!("{n}.attn.proj"), d, d, true),
                        spatial_bias: init.table(
                            &format!("{n}.attn.spatial_bias"),
                            &[(2 * geom.win_h - 1) * (2 * geom.win_w - 1), geom.heads],
                        ),
                        temporal_bias: init.table(&format!("{n}.attn.temporal_bias"), &[2 * t - 1, geom.heads]),
                        fc1: init.linear(&format!("{n}.ffn.fc1"), d, config.mlp_ratio * d, true),
                        fc2: init.linear(&format!("{n}.ffn.fc2"), config.mlp_ratio * d, d, true),
                        hf_reduce: init.linear(&format!("{n}.hf.reduce"), d, r, true),
                        hf_conv: init.linear(&format!("{n}.hf.conv"), k2 * r, r, true),
                        hf_expand: init.linear(&format!("{n}.hf.expand"), r, d, true),
                    }
                })
                .collect();
            let merge = (s + 1 < STAGES).then(|| {
                (
                    init.norm(&format!("stages.{s}.merge.norm"), 4 * d),
                    init.linear(&format!("stages.{s}.merge.reduction"), 4 * d, 2 * d, false),
                )
            });
            stages.push(StageIds { blocks, merge });
        }
        let last = config.stage_dim(STAGES - 1);
        let block = config.decoder_block();
        let decoder_norm = init.norm("decoder.norm", last);
        let decoder = init.linear("decoder.proj", last, block * block * config.spectral_group, true);
        let ids = ModelIds {
            embed,
            embed_norm,
            mask_token,
            stages,
            decoder_norm,
            decoder,
        };
        Ok(Self {
            config,
            params: store,
            ids,
            layouts: Mutex::new(HashMap::new()),
        })
    }

    pub fn grid(&self) -> PatchGrid {
        self.config.patch_grid().expect("validated at construction")
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Converts the parameters to another scalar type, keeping names and order.
    pub fn cast<U: Scalar>(&self) -> HybridModel<U> {
        HybridModel {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
            layouts: Mutex::new(HashMap::new()),
        }
    }

    pub fn layout(&self, batch: usize) -> Result<Arc<Layout<S>>> {
        if batch == 0 {
            return Err(Error::Invalid("batch must not be empty".into()));
        }
        let mut cache = self.layouts.lock().expect("layout cache poisoned");
        if let Some(l) = cache.get(&batch) {
            return Ok(l.clone());
        }
        let l = Arc::new(Layout::new(&self.config, batch)?);
        cache.insert(batch, l.clone());
        Ok(l)
    }

    /// Projects `[B·T·G·n_h·n_w, p²c_p]` patch rows to stage-1 tokens; rows
    /// flagged in `masked` become the mask token.
    pub fn patch_embed(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        patches: Var,
        masked: Option<Arc<Vec<bool>>>,
        batch: usize,
    ) -> Result<TokenMap> {
        let grid = self.grid();
        let rows = batch * grid.num_patches();
        let expected = [rows, grid.patch_dim()];
        let pv = g.value(patches);
        if pv.rows() != rows || pv.cols() != grid.patch_dim() {
            return Err(Error::Shape {
                expected: expected.to_vec(),
                actual: pv.shape().to_vec(),
            });
        }
        let x = lin(g, p, &self.ids.embed, patches);
        let mut x = norm(g, p, &self.ids.embed_norm, x);
        if let Some(m) = masked {
            if m.len() != rows {
                return Err(Error::Shape {
                    expected: vec![rows],
                    actual: vec![m.len()],
                });
            }
            x = g.fill_rows(x, p.var(self.ids.mask_token), m);
        }
        Ok(TokenMap {
            var: x,
            stage: 0,
            batch,
            frames: grid.t,
            groups: grid.groups,
            h: grid.n_h,
            w: grid.n_w,
            dim: self.config.embed_dim,
        })
    }

    fn check_tokens(&self, g: &Graph<S>, x: &TokenMap) -> Result<()> {
        let v = g.value(x.var);
        if v.rows() != x.rows() || v.cols() != x.dim {
            return Err(Error::Shape {
                expected: vec![x.rows(), x.dim],
                actual: v.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Bottleneck convolution applied to every `(t, g)` slice with shared weights.
    pub fn hf_branch(&self, g: &mut Graph<S>, p: &Bound, x: &TokenMap, block: usize) -> Result<Var> {
        self.check_tokens(g, x)?;
        let ids = &self.ids.stages[x.stage].blocks[block];
        let layout = self.layout(x.batch)?;
        let n = norm(g, p, &ids.norm_hf, x.var);
        let r = lin(g, p, &ids.hf_reduce, n);
        let width = g.value(r).cols();
        let k2 = self.config.hf_kernel * self.config.hf_kernel;
        let nb = g.row_mix(r, layout.stages[x.stage].conv.clone());
        let nb = g.reshape(nb, &[x.rows(), k2 * width]);
        let c = lin(g, p, &ids.hf_conv, nb);
        let c = g.gelu(c);
        Ok(lin(g, p, &ids.hf_expand, c))
    }

    /// Window attention within each `(t, g)` frame; odd blocks use shifted windows.
    /// Returns the attention output before the residual.
    pub fn spatial_attention(&self, g: &mut Graph<S>, p: &Bound, x: &TokenMap, n: Var, block: usize) -> Result<Var> {
        let ids = &self.ids.stages[x.stage].blocks[block];
        let layout = self.layout(x.batch)?;
        let wl = layout.stages[x.stage].windows[block % 2].clone();
        let xs = g.row_mix(n, wl.gather.clone());
        let qkv = lin(g, p, &ids.qkv, xs);
        let a = g.attention(qkv, Some(p.var(ids.spatial_bias)), wl.spec.clone());
        let a = lin(g, p, &ids.proj, a);
        Ok(g.row_mix(a, wl.scatter.clone()))
    }

    /// Attention across the `T` tokens sharing a group and position.
    pub fn temporal_attention(&self, g: &mut Graph<S>, p: &Bound, x: &TokenMap, n: Var, block: usize) -> Result<Var> {
        let ids = &self.ids.stages[x.stage].blocks[block];
        let layout = self.layout(x.batch)?;
        let tl = &layout.stages[x.stage].temporal;
        let xs = g.row_mix(n, tl.gather.clone());
        let qkv = lin(g, p, &ids.qkv, xs);
        let a = g.attention(qkv, Some(p.var(ids.temporal_bias)), tl.spec.clone());
        let a = lin(g, p, &ids.proj, a);
        Ok(g.row_mix(a, tl.scatter.clone()))
    }

    pub fn lf_branch(&self, g: &mut Graph<S>, p: &Bound, x: &TokenMap, block: usize) -> Result<Var> {
        self.check_tokens(g, x)?;
        let ids = &self.ids.stages[x.stage].blocks[block];
        let n = norm(g, p, &ids.norm_spatial, x.var);
        let a = self.spatial_attention(g, p, x, n, block)?;
        let u = g.add(x.var, a);
        let n = norm(g, p, &ids.norm_temporal, u);
        let a = self.temporal_attention(g, p, x, n, block)?;
        let u = g.add(u, a);
        let n = norm(g, p, &ids.norm_ffn, u);
        let h = lin(g, p, &ids.fc1, n);
        let h = g.gelu(h);
        let f = lin(g, p, &ids.fc2, h);
        Ok(g.add(u, f))
    }

    /// `residual + hf ⊙ lf`.
    pub fn fuse(&self, g: &mut Graph<S>, residual: Var, hf: Var, lf: Var) -> Result<Var> {
        let shapes = [g.value(residual).shape(), g.value(hf).shape(), g.value(lf).shape()];
        if shapes[0] != shapes[1] || shapes[1] != shapes[2] {
            return Err(Error::Shape {
                expected: shapes[0].to_vec(),
                actual: if shapes[0] != shapes[1] { shapes[1] } else { shapes[2] }.to_vec(),
            });
        }
        let prod = g.mul(hf, lf);
        Ok(g.add(residual, prod))
    }

    pub fn block(&self, g: &mut Graph<S>, p: &Bound, x: &TokenMap, block: usize) -> Result<TokenMap> {
        let hf = self.hf_branch(g, p, x, block)?;
        let lf = self.lf_branch(g, p, x, block)?;
        let var = self.fuse(g, x.var, hf, lf)?;
        Ok(TokenMap { var, ..*x })
    }

    /// Concatenates 2×2 neighbours and projects `4D → 2D`.
    pub fn patch_merge(&self, g: &mut Graph<S>, p: &Bound, x: &TokenMap) -> Result<TokenMap> {
        self.check_tokens(g, x)?;
        if x.h % 2 != 0 || x.w % 2 != 0 {
            return Err(Error::Divisibility {
                axis: "merge grid",
                value: if x.h % 2 != 0 { x.h } else { x.w },
                divisor: 2,
            });
        }
        let (norm_ids, reduction) = self.ids.stages[x.stage]
            .merge
            .as_ref()
            .ok_or_else(|| Error::Invalid(format!("stage {} has no merge", x.stage + 1)))?;
        let layout = self.layout(x.batch)?;
        let gathered = g.row_mix(x.var, layout.stages[x.stage].merge.clone().expect("merge layout"));
        let rows = x.rows() / 4;
        let cat = g.reshape(gathered, &[rows, 4 * x.dim]);
        let n = norm(g, p, norm_ids, cat);
        let var = lin(g, p, reduction, n);
        Ok(TokenMap {
            var,
            stage: x.stage + 1,
            h: x.h / 2,
            w: x.w / 2,
            dim: 2 * x.dim,
            ..*x
        })
    }

    pub fn encode(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        patches: Var,
        masked: Option<Arc<Vec<bool>>>,
        batch: usize,
    ) -> Result<StageFeatures> {
        let mut x = self.patch_embed(g, p, patches, masked, batch)?;
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            for b in 0..self.config.depths[s] {
                x = self.block(g, p, &x, b)?;
            }
            stages.push(x);
            if s + 1 < STAGES {
                x = self.patch_merge(g, p, &x)?;
            }
        }
        Ok(StageFeatures { stages })
    }

    /// Linear pixel-block head on final-stage tokens, reassembled to `[B, T, C, H, W]`.
    pub fn decode_reconstruction(&self, g: &mut Graph<S>, p: &Bound, feats: &StageFeatures) -> Result<Var> {
        let x = feats
            .stages
            .get(STAGES - 1)
            .ok_or_else(|| Error::Invalid("decoder needs all four stages".into()))?;
        let geom = self.config.stage(STAGES - 1)?;
        if (x.h, x.w, x.dim) != (geom.h, geom.w, geom.dim) {
            return Err(Error::Shape {
                expected: vec![geom.h, geom.w, geom.dim],
                actual: vec![x.h, x.w, x.dim],
            });
        }
        self.check_tokens(g, x)?;
        let n = norm(g, p, &self.ids.decoder_norm, x.var);
        let blocks = lin(g, p, &self.ids.decoder, n);
        self.assemble_blocks(g, blocks, x.batch)
    }

    /// Places per-token `[c_p, 8p, 8p]` pixel blocks at their image positions.
    pub fn assemble_blocks(&self, g: &mut Graph<S>, blocks: Var, batch: usize) -> Result<Var> {
        let layout = self.layout(batch)?;
        let side = self.config.decoder_block();
        let cp = self.config.spectral_group;
        let v = g.value(blocks);
        if v.cols() != cp * side * side {
            return Err(Error::Shape {
                expected: vec![v.rows(), cp * side * side],
                actual: v.shape().to_vec(),
            });
        }
        let rows = v.rows();
        if rows * cp * side != layout.decoder.in_rows() {
            return Err(Error::Shape {
                expected: vec![layout.decoder.in_rows() / (cp * side), cp * side * side],
                actual: v.shape().to_vec(),
            });
        }
        let segments = g.reshape(blocks, &[rows * cp * side, side]);
        let image = g.row_mix(segments, layout.decoder.clone());
        let (h, w) = self.config.image_size;
        Ok(g.reshape(image, &[batch, self.config.frames, self.config.channels, h, w]))
    }

    /// Encoder plus decoder in one call.
    pub fn reconstruct(
        &self,
        g: &mut Graph<S>,
        p: &Bound,
        patches: Var,
        masked: Option<Arc<Vec<bool>>>,
        batch: usize,
    ) -> Result<(StageFeatures, Var)> {
        let feats = self.encode(g, p, patches, masked, batch)?;
        let out = self.decode_reconstruction(g, p, &feats)?;
        Ok((feats, out))
    }
}

/// Patchifies each `[T, C, H, W]` input and stacks the patches as rows.
pub fn patch_rows<S: Scalar>(grid: &PatchGrid, inputs: &[&Tensor<S>]) -> Result<Tensor<S>> {
    let mut data = Vec::with_capacity(inputs.len() * grid.num_patches() * grid.patch_dim());
    for x in inputs {
        data.extend_from_slice(patchify(x, grid)?.data());
    }
    Tensor::from_vec(&[inputs.len() * grid.num_patches(), grid.patch_dim()], data)
}

/// Per-row mask flags for a batch with one plan per sample.
pub fn mask_rows(plans: &[&MaskPlan]) -> Arc<Vec<bool>> {
    Arc::new(plans.iter().flat_map(|p| p.patch_mask()).collect())
}
