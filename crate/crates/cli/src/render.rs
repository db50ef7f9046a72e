//! 8-bit RGB previews of `[T, C, H, W]` reflectance stacks.

use std::path::Path;

use image::{Rgb, RgbImage};
use stfm::data::SceneSample;
use stfm::{Error, Result};

const GAP: u32 = 2;
const MASKED: Rgb<u8> = Rgb([48, 48, 48]);

/// Red, green and blue band indices: full six-band stacks are ordered
/// deep blue, blue, green, red, red edge, NIR; padded four-band stacks
/// blue, green, red, NIR.
pub fn rgb_bands(sample: &SceneSample) -> [usize; 3] {
    if sample.band_valid.iter().all(|&v| v) {
        [3, 2, 1]
    } else {
        [2, 1, 0]
    }
}

fn percentile(sorted: &[f32], q: f64) -> f32 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Input, masked view and reconstruction side by side, one row per frame.
/// `patch_masked` is `[T, n_h, n_w]`; masked patches are painted grey in the
/// middle panel. Contrast is a 2–98 % stretch of the input, shared by all panels.
pub fn triplet(
    input: &SceneSample,
    masked_view: &SceneSample,
    reconstruction: &SceneSample,
    patch_masked: &[bool],
    patch: usize,
) -> RgbImage {
    let d = input.dims();
    let rgb = rgb_bands(input);
    let (n_h, n_w) = (d.h / patch, d.w / patch);
    let stretch: Vec<(f32, f32)> = rgb
        .iter()
        .map(|&b| {
            let mut v: Vec<f32> = (0..d.t).flat_map(|t| input.channel(t, b).iter().copied()).collect();
            v.sort_by(f32::total_cmp);
            let (lo, hi) = (percentile(&v, 0.02), percentile(&v, 0.98));
            (lo, (hi - lo).max(1e-6))
        })
        .collect();
    let (w, h) = (d.w as u32, d.h as u32);
    let mut img = RgbImage::from_pixel(3 * w + 2 * GAP, d.t as u32 * h + (d.t as u32 - 1) * GAP, Rgb([255, 255, 255]));
    for t in 0..d.t {
        for (panel, s) in [input, masked_view, reconstruction].into_iter().enumerate() {
            for y in 0..d.h {
                for x in 0..d.w {
                    let hidden = panel == 1 && patch_masked[(t * n_h + y / patch) * n_w + x / patch];
                    let px = if hidden {
                        MASKED
                    } else {
                        let mut c = [0u8; 3];
                        for (k, &b) in rgb.iter().enumerate() {
                            let (lo, span) = stretch[k];
                            let v = (s.channel(t, b)[y * d.w + x] - lo) / span;
                            c[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                        }
                        Rgb(c)
                    };
                    img.put_pixel(panel as u32 * (w + GAP) + x as u32, t as u32 * (h + GAP) + y as u32, px);
                }
            }
        }
    }
    img
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: std::io::Error::other(e),
    })
}
