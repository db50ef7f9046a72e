use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{build_patch_grid, PatchGrid};

/// Number of encoder stages; three patch merges sit between them.
pub const STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `(H, W)` in pixels.
    pub image_size: (usize, usize),
    pub channels: usize,
    pub frames: usize,
    pub patch_size: usize,
    pub spectral_group: usize,
    /// Mask window in patches `(rows, cols)`; spans all frames.
    pub mask_window: (usize, usize),
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Attention window side in tokens, clamped to each stage's grid.
    pub attention_window: usize,
    pub shift: usize,
    pub mlp_ratio: usize,
    pub hf_kernel: usize,
    pub hf_bottleneck_ratio: f64,
    pub init_std: f64,
}

/// Per-stage window geometry after clamping to the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageGeometry {
    pub h: usize,
    pub w: usize,
    pub dim: usize,
    pub heads: usize,
    pub win_h: usize,
    pub win_w: usize,
    /// Shift applied on odd blocks; zero on an axis covered by one window.
    pub shift_h: usize,
    pub shift_w: usize,
}

impl ModelConfig {
    /// Swin-T scale encoder on 512² six-band, six-frame inputs.
    pub fn swin_t() -> Self {
        Self {
            image_size: (512, 512),
            channels: 6,
            frames: 6,
            patch_size: 4,
            spectral_group: 2,
            mask_window: (8, 8),
            embed_dim: 96,
            depths: vec![2, 2, 6, 2],
            num_heads: vec![3, 6, 12, 24],
            attention_window: 8,
            shift: 4,
            mlp_ratio: 4,
            hf_kernel: 3,
            hf_bottleneck_ratio: 0.25,
            init_std: 0.02,
        }
    }

    /// The tiny architecture on 64² tiles with 4-pixel patches.
    pub fn desk() -> Self {
        Self {
            image_size: (64, 64),
            patch_size: 4,
            ..Self::tiny()
        }
    }

    /// Minimal configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: (16, 16),
            channels: 6,
            frames: 2,
            patch_size: 2,
            spectral_group: 2,
            mask_window: (4, 4),
            embed_dim: 8,
            depths: vec![1, 1, 1, 1],
            num_heads: vec![1, 1, 2, 2],
            attention_window: 4,
            shift: 2,
            ..Self::swin_t()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "swin_t" => Ok(Self::swin_t()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown model preset {other:?} (expected swin_t, desk or tiny)"
            ))),
        }
    }

    pub fn patch_grid(&self) -> Result<PatchGrid> {
        build_patch_grid(
            (self.frames, self.channels, self.image_size.0, self.image_size.1),
            self.patch_size,
            self.spectral_group,
            (self.frames, self.mask_window.0, self.mask_window.1),
        )
    }

    pub fn groups(&self) -> usize {
        self.channels / self.spectral_group
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    /// Side of the square pixel block each final-stage token reconstructs.
    pub fn decoder_block(&self) -> usize {
        self.patch_size << (STAGES - 1)
    }

    pub fn hf_bottleneck(&self, dim: usize) -> usize {
        ((dim as f64 * self.hf_bottleneck_ratio).round() as usize).max(1)
    }

    pub fn stage(&self, stage: usize) -> Result<StageGeometry> {
        let grid = self.patch_grid()?;
        let (h, w) = (grid.n_h >> stage, grid.n_w >> stage);
        let dim = self.stage_dim(stage);
        let heads = self.num_heads[stage];
        let (win_h, win_w) = (self.attention_window.min(h), self.attention_window.min(w));
        if h == 0 || w == 0 || h % win_h != 0 || w % win_w != 0 {
            return Err(Error::Config(format!(
                "stage {} grid {h}x{w} is not tiled by a {win_h}x{win_w} attention window",
                stage + 1
            )));
        }
        let shift_of = |win: usize, extent: usize| if win < extent { self.shift } else { 0 };
        Ok(StageGeometry {
            h,
            w,
            dim,
            heads,
            win_h,
            win_w,
            shift_h: shift_of(win_h, h),
            shift_w: shift_of(win_w, w),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.len() != STAGES || self.num_heads.len() != STAGES {
            return Err(Error::Config(format!(
                "depths and num_heads need {STAGES} entries, got {} and {}",
                self.depths.len(),
                self.num_heads.len()
            )));
        }
        if self.embed_dim == 0 || self.depths.iter().any(|&d| d == 0) || self.mlp_ratio == 0 {
            return Err(Error::Config("embed_dim, depths and mlp_ratio must be positive".into()));
        }
        let grid = self.patch_grid()?;
        let down = 1 << (STAGES - 1);
        if grid.n_h % down != 0 {
            return Err(Error::Divisibility {
                axis: "n_h",
                value: grid.n_h,
                divisor: down,
            });
        }
        if grid.n_w % down != 0 {
            return Err(Error::Divisibility {
                axis: "n_w",
                value: grid.n_w,
                divisor: down,
            });
        }
        if self.attention_window == 0 || self.shift >= self.attention_window {
            return Err(Error::Config(format!(
                "shift {} must be smaller than attention window {}",
                self.shift, self.attention_window
            )));
        }
        for s in 0..STAGES {
            let heads = self.num_heads[s];
            if heads == 0 || self.stage_dim(s) % heads != 0 {
                return Err(Error::Divisibility {
                    axis: "stage dim",
                    value: self.stage_dim(s),
                    divisor: heads,
                });
            }
            self.stage(s)?;
        }
        if self.hf_kernel % 2 == 0 {
            return Err(Error::Config(format!("hf_kernel {} must be odd", self.hf_kernel)));
        }
        if !(self.hf_bottleneck_ratio > 0.0 && self.hf_bottleneck_ratio <= 1.0) {
            return Err(Error::Config("hf_bottleneck_ratio must lie in (0, 1]".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }
}
