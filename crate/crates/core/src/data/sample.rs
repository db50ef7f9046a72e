use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-pixel class ids `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub ids: Vec<i32>,
    pub num_classes: usize,
}

/// One georeferenced tile observed at `T` timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample<S = f32> {
    pub sample_id: String,
    /// `[T, C, H, W]`.
    pub values: Tensor<S>,
    pub band_valid: Vec<bool>,
    /// Day-of-year per frame, strictly increasing.
    pub timestamps: Vec<u32>,
    pub label_mask: Option<LabelMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub t: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(t: usize, c: usize, h: usize, w: usize) -> Self {
        Self { t, c, h, w }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.t, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.t * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, t: usize, c: usize, y: usize, x: usize) -> usize {
        ((t * self.c + c) * self.h + y) * self.w + x
    }
}

impl<S: Scalar> SceneSample<S> {
    pub fn dims(&self) -> Dims {
        let s = self.values.shape();
        Dims::new(s[0], s[1], s[2], s[3])
    }

    pub fn valid_channels(&self) -> usize {
        self.band_valid.iter().filter(|&&v| v).count()
    }

    /// `(C, H, W)` slice of frame `t`.
    pub fn frame(&self, t: usize) -> &[S] {
        let d = self.dims();
        let n = d.c * d.h * d.w;
        &self.values.data()[t * n..(t + 1) * n]
    }

    pub fn channel(&self, t: usize, c: usize) -> &[S] {
        let d = self.dims();
        let n = d.h * d.w;
        let start = (t * d.c + c) * n;
        &self.values.data()[start..start + n]
    }

    pub fn cast<U: Scalar>(&self) -> SceneSample<U> {
        SceneSample {
            sample_id: self.sample_id.clone(),
            values: self.values.cast(),
            band_valid: self.band_valid.clone(),
            timestamps: self.timestamps.clone(),
            label_mask: self.label_mask.clone(),
        }
    }

    /// Checks every structural invariant of a sample.
    pub fn validate(&self) -> Result<()> {
        let shape = self.values.shape();
        if shape.len() != 4 || shape.iter().any(|&d| d == 0) {
            return Err(Error::Invalid(format!(
                "sample {} must have a non-empty [T,C,H,W] shape, got {shape:?}",
                self.sample_id
            )));
        }
        let d = self.dims();
        if self.band_valid.len() != d.c {
            return Err(Error::Invalid(format!(
                "sample {}: {} band flags for {} channels",
                self.sample_id,
                self.band_valid.len(),
                d.c
            )));
        }
        if self.timestamps.len() != d.t {
            return Err(Error::Invalid(format!(
                "sample {}: {} timestamps for {} frames",
                self.sample_id,
                self.timestamps.len(),
                d.t
            )));
        }
        if self.timestamps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid(format!(
                "sample {}: timestamps not strictly increasing",
                self.sample_id
            )));
        }
        if !self.values.all_finite() {
            return Err(Error::Invalid(format!("sample {}: non-finite values", self.sample_id)));
        }
        for t in 0..d.t {
            for c in (0..d.c).filter(|&c| !self.band_valid[c]) {
                if self.channel(t, c).iter().any(|v| !v.is_zero()) {
                    return Err(Error::Invalid(format!(
                        "sample {}: invalid channel {c} is not zero",
                        self.sample_id
                    )));
                }
            }
        }
        if let Some(mask) = &self.label_mask {
            if mask.ids.len() != d.h * d.w {
                return Err(Error::Invalid(format!(
                    "sample {}: label mask has {} pixels, expected {}",
                    self.sample_id,
                    mask.ids.len(),
                    d.h * d.w
                )));
            }
            if mask.ids.iter().any(|&i| i < 0 || i as usize >= mask.num_classes) {
                return Err(Error::Invalid(format!(
                    "sample {}: label id outside [0, {})",
                    self.sample_id, mask.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Repeats a single-frame sample `t` times (single-image tasks fed to the temporal encoder).
    pub fn repeat_frames(&self, t: usize) -> Result<Self> {
        let d = self.dims();
        if d.t != 1 {
            return Err(Error::Invalid(format!(
                "repeat_frames expects one frame, sample {} has {}",
                self.sample_id, d.t
            )));
        }
        let mut data = Vec::with_capacity(d.len() * t);
        for _ in 0..t {
            data.extend_from_slice(self.values.data());
        }
        let base = self.timestamps[0];
        Ok(Self {
            sample_id: self.sample_id.clone(),
            values: Tensor::from_vec(&[t, d.c, d.h, d.w], data)?,
            band_valid: self.band_valid.clone(),
            timestamps: (0..t as u32).map(|i| base + i).collect(),
            label_mask: self.label_mask.clone(),
        })
    }
}
