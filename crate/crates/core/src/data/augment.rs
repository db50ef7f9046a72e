//! Temporally consistent spatial and colour augmentation: one parameter set is
//! applied identically to every frame of a sample.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::sample::{LabelMask, SceneSample};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Crop {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SpatialParams {
    pub crop: Option<Crop>,
    pub hflip: bool,
    pub vflip: bool,
    /// Counter-clockwise rotation in multiples of 90°.
    pub quarter_turns: u8,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColorParams {
    /// Per-channel gain; empty means 1 everywhere.
    pub gain: Vec<f64>,
    /// Per-channel offset; empty means 0 everywhere.
    pub offset: Vec<f64>,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub spatial: SpatialParams,
    pub color: ColorParams,
    pub seed: u64,
}

/// Ranges for [`AugmentationParams::sample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Side of the random crop as a fraction of the input; 1 disables cropping.
    pub crop_fraction: f64,
    pub flip: bool,
    pub rotate: bool,
    pub gain_jitter: f64,
    pub offset_jitter: f64,
    pub max_blur_sigma: f64,
    pub max_noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_fraction: 1.0,
            flip: true,
            rotate: true,
            gain_jitter: 0.1,
            offset_jitter: 0.02,
            max_blur_sigma: 1.0,
            max_noise_sigma: 0.01,
        }
    }
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn sample(cfg: &AugmentConfig, h: usize, w: usize, channels: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[rng::label("augment-params")]);
        let crop = (cfg.crop_fraction < 1.0).then(|| {
            let ch = ((h as f64 * cfg.crop_fraction).round() as usize).clamp(1, h);
            let cw = ((w as f64 * cfg.crop_fraction).round() as usize).clamp(1, w);
            Crop {
                y: r.random_range(0..=h - ch),
                x: r.random_range(0..=w - cw),
                h: ch,
                w: cw,
            }
        });
        let square = crop.map(|c| c.h == c.w).unwrap_or(h == w);
        let spatial = SpatialParams {
            crop,
            hflip: cfg.flip && r.random_bool(0.5),
            vflip: cfg.flip && r.random_bool(0.5),
            quarter_turns: if cfg.rotate && square { r.random_range(0..4) } else { 0 },
        };
        let mut jitter = |amp: f64, center: f64| -> Vec<f64> {
            (0..channels).map(|_| center + amp * (2.0 * r.random::<f64>() - 1.0)).collect()
        };
        let gain = jitter(cfg.gain_jitter, 1.0);
        let offset = jitter(cfg.offset_jitter, 0.0);
        let color = ColorParams {
            gain,
            offset,
            blur_sigma: cfg.max_blur_sigma * r.random::<f64>(),
            noise_sigma: cfg.max_noise_sigma * r.random::<f64>(),
        };
        Self {
            spatial,
            color,
            seed: r.random(),
        }
    }
}

/// Output-pixel → input-pixel index map shared by all frames, with output dims.
pub fn spatial_index_map(p: &SpatialParams, h: usize, w: usize) -> Result<(Vec<usize>, usize, usize)> {
    let (mut gh, mut gw) = (h, w);
    let mut grid: Vec<usize> = (0..h * w).collect();
    if let Some(c) = p.crop {
        if c.h == 0 || c.w == 0 || c.y + c.h > h || c.x + c.w > w {
            return Err(Error::Invalid(format!("crop {c:?} outside {h}x{w}")));
        }
        grid = (c.y..c.y + c.h)
            .flat_map(|y| (c.x..c.x + c.w).map(move |x| y * w + x))
            .collect();
        gh = c.h;
        gw = c.w;
    }
    if p.hflip {
        for row in grid.chunks_exact_mut(gw) {
            row.reverse();
        }
    }
    if p.vflip {
        grid = grid.chunks_exact(gw).rev().flatten().copied().collect();
    }
    for _ in 0..p.quarter_turns % 4 {
        let mut rotated = vec![0; grid.len()];
        // out[i][j] = in[j][gw-1-i], output is gw x gh
        for i in 0..gw {
            for j in 0..gh {
                rotated[i * gh + j] = grid[j * gw + (gw - 1 - i)];
            }
        }
        grid = rotated;
        std::mem::swap(&mut gh, &mut gw);
    }
    Ok((grid, gh, gw))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| {
                    let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    wt * plane[y * w + xx]
                })
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, wt)| {
                    let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    wt * tmp[yy * w + x]
                })
                .sum();
        }
    }
}

/// Applies `params` to every frame. Colour transforms touch valid channels only
/// and the result is clamped to `[0, 1]`.
pub fn augment<S: Scalar>(sample: &SceneSample<S>, params: &AugmentationParams) -> Result<SceneSample<S>> {
    let d = sample.dims();
    let c = &params.color;
    if c.blur_sigma < 0.0 || c.noise_sigma < 0.0 {
        return Err(Error::Invalid("blur and noise sigmas must be >= 0".into()));
    }
    for v in [&c.gain, &c.offset] {
        if !v.is_empty() && v.len() != d.c {
            return Err(Error::Invalid(format!("colour parameters need {} channels", d.c)));
        }
    }
    let (map, oh, ow) = spatial_index_map(&params.spatial, d.h, d.w)?;
    let color_identity = c.gain.iter().all(|&g| g == 1.0)
        && c.offset.iter().all(|&o| o == 0.0)
        && c.blur_sigma == 0.0
        && c.noise_sigma == 0.0;
    let kernel = (c.blur_sigma > 0.0).then(|| gaussian_kernel(c.blur_sigma));
    let noise = Normal::new(0.0, c.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut noise_rng: Rng = rng::stream(params.seed, &[rng::label("augment-noise")]);
    let mut out = Vec::with_capacity(d.t * d.c * oh * ow);
    for t in 0..d.t {
        for ch in 0..d.c {
            let src = sample.channel(t, ch);
            if !sample.band_valid[ch] || color_identity {
                out.extend(map.iter().map(|&i| src[i]));
                continue;
            }
            let mut plane: Vec<f64> = map.iter().map(|&i| src[i].as_f64()).collect();
            let gain = c.gain.get(ch).copied().unwrap_or(1.0);
            let offset = c.offset.get(ch).copied().unwrap_or(0.0);
            for v in plane.iter_mut() {
                *v = *v * gain + offset;
            }
            if let Some(k) = &kernel {
                blur_plane(&mut plane, oh, ow, k);
            }
            if c.noise_sigma > 0.0 {
                for v in plane.iter_mut() {
                    *v += noise.sample(&mut noise_rng);
                }
            }
            out.extend(plane.into_iter().map(|v| S::lit(v.clamp(0.0, 1.0))));
        }
    }
    let label_mask = sample.label_mask.as_ref().map(|m| LabelMask {
        ids: map.iter().map(|&i| m.ids[i]).collect(),
        num_classes: m.num_classes,
    });
    Ok(SceneSample {
        sample_id: sample.sample_id.clone(),
        values: Tensor::from_vec(&[d.t, d.c, oh, ow], out)?,
        band_valid: sample.band_valid.clone(),
        timestamps: sample.timestamps.clone(),
        label_mask,
    })
}
