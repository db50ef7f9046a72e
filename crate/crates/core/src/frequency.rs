//! Window-level ideal low/high-pass Fourier filtering of encoder inputs.
//!
//! Radial frequency is normalised so that 1 is the corner of the spectrum
//! (Nyquist on both axes); a low-pass cutoff of 1 therefore keeps everything.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::PatchGrid;
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrequencyFilterSpec {
    pub cutoff_fraction: f64,
    pub selection_prob: f64,
    pub seed: u64,
}

impl Default for FrequencyFilterSpec {
    fn default() -> Self {
        Self {
            cutoff_fraction: 0.25,
            selection_prob: 0.5,
            seed: 0,
        }
    }
}

fn check_cutoff(cutoff: f64) -> Result<()> {
    if !(cutoff > 0.0 && cutoff <= 1.0) {
        return Err(Error::Config(format!("cutoff fraction {cutoff} outside (0, 1]")));
    }
    Ok(())
}

impl FrequencyFilterSpec {
    pub fn validate(&self) -> Result<()> {
        check_cutoff(self.cutoff_fraction)?;
        if !(0.0..=1.0).contains(&self.selection_prob) {
            return Err(Error::Config(format!(
                "selection probability {} outside [0, 1]",
                self.selection_prob
            )));
        }
        Ok(())
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    let k = if 2 * k > n { k as f64 - n as f64 } else { k as f64 };
    k / n as f64
}

/// Normalised radial frequency of DFT bin `(ky, kx)` in an `h × w` slice.
pub fn radial_frequency(ky: usize, kx: usize, h: usize, w: usize) -> f64 {
    let (fy, fx) = (signed_freq(ky, h), signed_freq(kx, w));
    (fy * fy + fx * fx).sqrt() / 0.5f64.hypot(0.5)
}

/// Ideal radial filter for `h × w` slices.
pub struct RadialFilter<S: Scalar> {
    h: usize,
    w: usize,
    keep: Vec<bool>,
    row: Arc<dyn Fft<S>>,
    row_inv: Arc<dyn Fft<S>>,
    col: Arc<dyn Fft<S>>,
    col_inv: Arc<dyn Fft<S>>,
}

impl<S: Scalar> RadialFilter<S> {
    pub fn new(h: usize, w: usize, cutoff: f64, mode: FilterMode) -> Result<Self> {
        check_cutoff(cutoff)?;
        if h == 0 || w == 0 {
            return Err(Error::Invalid("empty filter slice".into()));
        }
        let keep = (0..h * w)
            .map(|i| {
                let low = radial_frequency(i / w, i % w, h, w) <= cutoff;
                low == (mode == FilterMode::Low)
            })
            .collect();
        let mut planner = FftPlanner::new();
        Ok(Self {
            h,
            w,
            keep,
            row: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        })
    }

    fn transform_2d(&self, buf: &mut [Complex<S>], row: &dyn Fft<S>, col: &dyn Fft<S>) {
        let (h, w) = (self.h, self.w);
        row.process(buf);
        let mut column = vec![Complex::new(S::zero(), S::zero()); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    }

    /// Filters one slice in place.
    pub fn apply(&self, slice: &mut [S]) {
        assert_eq!(slice.len(), self.h * self.w, "slice does not match filter size");
        let mut buf: Vec<Complex<S>> = slice.iter().map(|&v| Complex::new(v, S::zero())).collect();
        self.transform_2d(&mut buf, &*self.row, &*self.col);
        for (b, &k) in buf.iter_mut().zip(&self.keep) {
            if !k {
                *b = Complex::new(S::zero(), S::zero());
            }
        }
        self.transform_2d(&mut buf, &*self.row_inv, &*self.col_inv);
        let scale = S::one() / S::of(self.h * self.w);
        for (v, b) in slice.iter_mut().zip(&buf) {
            *v = b.re * scale;
        }
    }
}

fn filter_slices<S: Scalar>(window: &Tensor<S>, cutoff: f64, mode: FilterMode) -> Result<Tensor<S>> {
    let s = window.shape();
    if s.len() < 2 {
        return Err(Error::Invalid(format!("window needs at least 2 axes, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let f = RadialFilter::new(h, w, cutoff, mode)?;
    let mut out = window.clone();
    for slice in out.data_mut().chunks_exact_mut(h * w) {
        f.apply(slice);
    }
    Ok(out)
}

/// Low-pass filters every trailing `h × w` slice of `window`.
pub fn lowpass_window<S: Scalar>(window: &Tensor<S>, cutoff: f64) -> Result<Tensor<S>> {
    filter_slices(window, cutoff, FilterMode::Low)
}

/// Complement of [`lowpass_window`]; removes DC.
pub fn highpass_window<S: Scalar>(window: &Tensor<S>, cutoff: f64) -> Result<Tensor<S>> {
    filter_slices(window, cutoff, FilterMode::High)
}

/// Seed-derived `(window index, mode)` pairs, sorted by window.
pub fn select_windows(grid: &PatchGrid, spec: &FrequencyFilterSpec) -> Result<Vec<(usize, FilterMode)>> {
    spec.validate()?;
    let n = grid.num_windows();
    let k = (spec.selection_prob * n as f64 + 1e-9).floor() as usize;
    let mut r = rng::stream(spec.seed, &[rng::label("frequency-select")]);
    let mut chosen = sample_indices(&mut r, n, k).into_vec();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|win| {
            let mut m = rng::stream(spec.seed, &[rng::label("frequency-mode"), win as u64]);
            (win, if m.random_bool(0.5) { FilterMode::Low } else { FilterMode::High })
        })
        .collect())
}

/// Filters the selected windows of a `[T, C, H, W]` tensor in every frame and band.
pub fn apply_frequency_augmentation<S: Scalar>(
    values: &Tensor<S>,
    grid: &PatchGrid,
    spec: &FrequencyFilterSpec,
) -> Result<Tensor<S>> {
    let expected = [grid.t, grid.c, grid.h, grid.w];
    if values.shape() != expected {
        return Err(Error::Shape {
            expected: expected.to_vec(),
            actual: values.shape().to_vec(),
        });
    }
    let selection = select_windows(grid, spec)?;
    let mut out = values.clone();
    if selection.is_empty() {
        return Ok(out);
    }
    let (wh, ww) = (grid.window.1 * grid.p, grid.window.2 * grid.p);
    let low = RadialFilter::new(wh, ww, spec.cutoff_fraction, FilterMode::Low)?;
    let high = RadialFilter::new(wh, ww, spec.cutoff_fraction, FilterMode::High)?;
    let gw = grid.window_grid().1;
    let mut slice = vec![S::zero(); wh * ww];
    let data = out.data_mut();
    for (win, mode) in selection {
        let (y0, x0) = ((win / gw) * wh, (win % gw) * ww);
        let f = if mode == FilterMode::Low { &low } else { &high };
        for plane in data.chunks_exact_mut(grid.h * grid.w) {
            for y in 0..wh {
                let row = (y0 + y) * grid.w + x0;
                slice[y * ww..(y + 1) * ww].copy_from_slice(&plane[row..row + ww]);
            }
            f.apply(&mut slice);
            for y in 0..wh {
                let row = (y0 + y) * grid.w + x0;
                plane[row..row + ww].copy_from_slice(&slice[y * ww..(y + 1) * ww]);
            }
        }
    }
    Ok(out)
}
