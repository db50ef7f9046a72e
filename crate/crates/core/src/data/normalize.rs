use serde::{Deserialize, Serialize};

use super::sample::SceneSample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-channel statistics of the training split. Channels that are invalid in
/// every sample keep mean 0 / std 1 and are never touched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Population mean/std per channel over all frames and pixels of `samples`,
/// counting a channel only where it is flagged valid.
pub fn compute_normalization_stats<S: Scalar>(samples: &[SceneSample<S>]) -> Result<NormalizationStats> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("normalization needs at least one sample".into()))?;
    let c = first.dims().c;
    let mut sum = vec![0.0f64; c];
    let mut count = vec![0usize; c];
    for s in samples {
        let d = s.dims();
        if d.c != c {
            return Err(Error::Shape {
                expected: vec![c],
                actual: vec![d.c],
            });
        }
        for t in 0..d.t {
            for ch in (0..c).filter(|&ch| s.band_valid[ch]) {
                sum[ch] += s.channel(t, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                count[ch] += d.h * d.w;
            }
        }
    }
    let valid: Vec<bool> = count.iter().map(|&n| n > 0).collect();
    let mean: Vec<f64> = (0..c)
        .map(|ch| if valid[ch] { sum[ch] / count[ch] as f64 } else { 0.0 })
        .collect();
    let mut sq = vec![0.0f64; c];
    for s in samples {
        let d = s.dims();
        for t in 0..d.t {
            for ch in (0..c).filter(|&ch| s.band_valid[ch]) {
                sq[ch] += s
                    .channel(t, ch)
                    .iter()
                    .map(|v| (v.as_f64() - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let mut std = vec![1.0; c];
    for ch in (0..c).filter(|&ch| valid[ch]) {
        let s = (sq[ch] / count[ch] as f64).sqrt();
        if !(s > 1e-12) {
            return Err(Error::ZeroVariance { channel: ch });
        }
        std[ch] = s;
    }
    Ok(NormalizationStats { mean, std, valid })
}

impl NormalizationStats {
    fn transform<S: Scalar>(&self, sample: &SceneSample<S>, f: impl Fn(f64, f64, f64) -> f64) -> Result<SceneSample<S>> {
        let d = sample.dims();
        if d.c != self.mean.len() {
            return Err(Error::Shape {
                expected: vec![self.mean.len()],
                actual: vec![d.c],
            });
        }
        let mut out = sample.clone();
        let plane = d.h * d.w;
        for (i, chunk) in out.values.data_mut().chunks_exact_mut(plane).enumerate() {
            let ch = i % d.c;
            if !sample.band_valid[ch] {
                continue;
            }
            let (m, s) = (self.mean[ch], self.std[ch]);
            for v in chunk {
                *v = S::lit(f(v.as_f64(), m, s));
            }
        }
        Ok(out)
    }

    pub fn normalize<S: Scalar>(&self, sample: &SceneSample<S>) -> Result<SceneSample<S>> {
        self.transform(sample, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<S: Scalar>(&self, sample: &SceneSample<S>) -> Result<SceneSample<S>> {
        self.transform(sample, |v, m, s| v * s + m)
    }
}

pub fn normalize<S: Scalar>(sample: &SceneSample<S>, stats: &NormalizationStats) -> Result<SceneSample<S>> {
    stats.normalize(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_scene, GeneratorConfig};
    use crate::data::tiling::pad_spectral_channels;

    fn corpus(channels: usize) -> Vec<SceneSample> {
        let cfg = GeneratorConfig {
            height: 16,
            width: 16,
            channels,
            ..Default::default()
        };
        (0..8)
            .map(|s| pad_spectral_channels(generate_synthetic_scene(s, &cfg).unwrap()).unwrap())
            .collect()
    }

    #[test]
    fn constant_valid_channel_is_rejected() {
        let mut s = corpus(6).remove(0);
        let d = s.dims();
        for t in 0..d.t {
            let start = d.index(t, 2, 0, 0);
            s.values.data_mut()[start..start + d.h * d.w].fill(0.4);
        }
        match compute_normalization_stats(&[s]) {
            Err(Error::ZeroVariance { channel }) => assert_eq!(channel, 2),
            other => panic!("expected zero variance, got {other:?}"),
        }
    }

    #[test]
    fn normalize_round_trip() {
        let xs = corpus(6);
        let stats = compute_normalization_stats(&xs).unwrap();
        for x in &xs {
            let back = stats.denormalize(&stats.normalize(x).unwrap()).unwrap();
            assert!(back.values.max_abs_diff(&x.values) < 1e-6);
        }
    }

    #[test]
    fn normalized_channels_are_centred_and_padding_untouched() {
        let xs = corpus(4);
        let stats = compute_normalization_stats(&xs).unwrap();
        let normed: Vec<_> = xs.iter().map(|x| stats.normalize(x).unwrap()).collect();
        for ch in 0..6 {
            let (mut sum, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
            for s in &normed {
                for t in 0..s.dims().t {
                    for &v in s.channel(t, ch) {
                        sum += v as f64;
                        sq += (v as f64).powi(2);
                        n += 1;
                    }
                }
            }
            if stats.valid[ch] {
                let mean = sum / n as f64;
                assert!(mean.abs() <= 1e-3, "channel {ch} mean {mean}");
                assert!((sq / n as f64 - mean * mean - 1.0).abs() < 1e-3);
            } else {
                assert_eq!(sq, 0.0);
            }
        }
    }
}
