use super::sample::{LabelMask, SceneSample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FULL_BANDS: usize = 6;
pub const REDUCED_BANDS: usize = 4;

/// Pads a four-band sample to six channels. The two appended channels are zero
/// and flagged invalid so they never contribute to the loss.
pub fn pad_spectral_channels<S: Scalar>(sample: SceneSample<S>) -> Result<SceneSample<S>> {
    let d = sample.dims();
    match d.c {
        FULL_BANDS => {
            log::warn!("sample {} already has {FULL_BANDS} channels; padding skipped", sample.sample_id);
            Ok(sample)
        }
        REDUCED_BANDS => {
            if sample.valid_channels() != REDUCED_BANDS {
                return Err(Error::Invalid(format!(
                    "sample {} must have {REDUCED_BANDS} valid bands before padding",
                    sample.sample_id
                )));
            }
            let plane = d.h * d.w;
            let mut data = Vec::with_capacity(d.t * FULL_BANDS * plane);
            for t in 0..d.t {
                data.extend_from_slice(sample.frame(t));
                data.extend(std::iter::repeat_n(S::zero(), (FULL_BANDS - REDUCED_BANDS) * plane));
            }
            let mut band_valid = sample.band_valid.clone();
            band_valid.extend([false; FULL_BANDS - REDUCED_BANDS]);
            Ok(SceneSample {
                values: Tensor::from_vec(&[d.t, FULL_BANDS, d.h, d.w], data)?,
                band_valid,
                ..sample
            })
        }
        c => Err(Error::Invalid(format!(
            "sample {}: cannot pad {c} channels (expected {REDUCED_BANDS} or {FULL_BANDS})",
            sample.sample_id
        ))),
    }
}

/// Identifier of the tile at offset `(y, x)` of `parent`.
pub fn tile_id(parent: &str, y: usize, x: usize) -> String {
    format!("{parent}~y{y:05}x{x:05}")
}

/// Parent scene id of a tile id (or the id itself for untiled samples).
pub fn parent_id(id: &str) -> &str {
    id.split_once('~').map(|(p, _)| p).unwrap_or(id)
}

/// Spatial crop of every frame (and of the label mask).
pub fn crop<S: Scalar>(
    sample: &SceneSample<S>,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    sample_id: String,
) -> Result<SceneSample<S>> {
    let d = sample.dims();
    if h == 0 || w == 0 || y0 + h > d.h || x0 + w > d.w {
        return Err(Error::Invalid(format!(
            "crop ({y0},{x0}) {h}x{w} outside {}x{}",
            d.h, d.w
        )));
    }
    let src = sample.values.data();
    let mut data = Vec::with_capacity(d.t * d.c * h * w);
    for t in 0..d.t {
        for c in 0..d.c {
            for y in y0..y0 + h {
                let row = d.index(t, c, y, x0);
                data.extend_from_slice(&src[row..row + w]);
            }
        }
    }
    let label_mask = sample.label_mask.as_ref().map(|m| LabelMask {
        ids: (y0..y0 + h)
            .flat_map(|y| m.ids[y * d.w + x0..y * d.w + x0 + w].iter().copied())
            .collect(),
        num_classes: m.num_classes,
    });
    Ok(SceneSample {
        sample_id,
        values: Tensor::from_vec(&[d.t, d.c, h, w], data)?,
        band_valid: sample.band_valid.clone(),
        timestamps: sample.timestamps.clone(),
        label_mask,
    })
}

/// Offsets `0, stride, 2·stride, …` whose tile fits entirely inside `extent`.
pub fn tile_offsets(extent: usize, tile: usize, stride: usize) -> Vec<usize> {
    if tile > extent || stride == 0 {
        return Vec::new();
    }
    (0..=(extent - tile) / stride).map(|i| i * stride).collect()
}

/// Cuts a scene into `tile_size`² tiles on the `stride` lattice, row-major by offset.
pub fn tile_scene<S: Scalar>(
    scene: &SceneSample<S>,
    tile_size: usize,
    stride: usize,
) -> Result<Vec<SceneSample<S>>> {
    let d = scene.dims();
    if tile_size == 0 || stride == 0 {
        return Err(Error::Config("tile size and stride must be positive".into()));
    }
    if tile_size > d.h || tile_size > d.w {
        return Err(Error::Invalid(format!(
            "tile {tile_size} larger than scene {}x{}",
            d.h, d.w
        )));
    }
    let mut tiles = Vec::new();
    for &y in &tile_offsets(d.h, tile_size, stride) {
        for &x in &tile_offsets(d.w, tile_size, stride) {
            tiles.push(crop(scene, y, x, tile_size, tile_size, tile_id(&scene.sample_id, y, x))?);
        }
    }
    Ok(tiles)
}
